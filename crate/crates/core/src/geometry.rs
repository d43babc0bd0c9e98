//! Simplex geometry: compositions, logratio bijections to Euclidean space and
//! their log-Jacobians, Aitchison operations, and the square-root sphere map.
//!
//! Every bijection here maps the open simplex with `K` parts to `R^D`,
//! `D = K - 1`, with the last part eliminated (`x_K = 1 - sum of the rest`).
//! Log-Jacobians are with respect to those first `D` coordinates.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{domain, ensure_len, Error, Result};

/// Components below this are treated as lying on the boundary.
pub const MIN_COMPONENT: f64 = 1e-300;
/// Allowed deviation of a composition's sum from one.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A point of the open simplex: `K >= 2` positive parts summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Composition {
    values: Vec<f64>,
}

impl Composition {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidDimension(format!(
                "a composition needs at least 2 parts, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < MIN_COMPONENT)
        {
            return Err(domain(format!("component {i} = {v} is not in the open simplex")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(domain(format!("components sum to {sum}, not 1")));
        }
        Ok(Self { values })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidDimension(format!("K = {k} < 2")));
        }
        Ok(Self { values: vec![1.0 / k as f64; k] })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of parts `K`.
    pub fn parts(&self) -> usize {
        self.values.len()
    }

    /// Intrinsic dimension `D = K - 1`.
    pub fn dim(&self) -> usize {
        self.values.len() - 1
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn ln(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.ln()).collect()
    }
}

impl<'de> Deserialize<'de> for Composition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        Composition::new(values).map_err(serde::de::Error::custom)
    }
}

/// A point of `R^D` with finite coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EuclideanPoint(Vec<f64>);

impl EuclideanPoint {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(domain(format!("non-finite coordinate {v}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Orthonormal, sum-zero `D x K` basis of the simplex tangent space.
///
/// Row `j` (1-based) is `(1, .., 1, -j, 0, .., 0) / sqrt(j (j + 1))` with `j`
/// leading ones.
#[derive(Debug, Clone, PartialEq)]
pub struct HelmertBasis {
    parts: usize,
    /// Row-major `D x K`.
    matrix: Vec<f64>,
}

impl HelmertBasis {
    pub fn new(parts: usize) -> Result<Self> {
        if parts < 2 {
            return Err(Error::InvalidDimension(format!("Helmert basis needs K >= 2, got {parts}")));
        }
        let d = parts - 1;
        let mut matrix = vec![0.0; d * parts];
        for row in 0..d {
            let j = (row + 1) as f64;
            let scale = 1.0 / (j * (j + 1.0)).sqrt();
            let r = &mut matrix[row * parts..(row + 1) * parts];
            r[..=row].iter_mut().for_each(|v| *v = scale);
            r[row + 1] = -j * scale;
        }
        Ok(Self { parts, matrix })
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn dim(&self) -> usize {
        self.parts - 1
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.parts + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.matrix[row * self.parts..(row + 1) * self.parts]
    }

    /// `H v` for `v` in `R^K`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|r| self.row(r).iter().zip(v).map(|(h, x)| h * x).sum())
            .collect()
    }

    /// `H^T z` for `z` in `R^D`.
    pub fn apply_transpose(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.parts];
        for (r, zr) in z.iter().enumerate() {
            for (o, h) in out.iter_mut().zip(self.row(r)) {
                *o += h * zr;
            }
        }
        out
    }
}

/// Helmert basis for `K` parts.
pub fn helmert_basis(parts: usize) -> Result<HelmertBasis> {
    HelmertBasis::new(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BijectionKind {
    Ilr,
    Sb,
    Alr,
    Mlr,
    /// `x -> sqrt(x)` onto the positive orthant of the unit sphere in `R^K`.
    /// Not a map to `R^D`, so it cannot back a flow model.
    Sphere,
}

impl BijectionKind {
    pub fn is_flow_bijection(self) -> bool {
        !matches!(self, BijectionKind::Sphere)
    }

    pub fn name(self) -> &'static str {
        match self {
            BijectionKind::Ilr => "ilr",
            BijectionKind::Sb => "sb",
            BijectionKind::Alr => "alr",
            BijectionKind::Mlr => "mlr",
            BijectionKind::Sphere => "sphere",
        }
    }
}

impl fmt::Display for BijectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BijectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ilr" => Ok(Self::Ilr),
            "sb" | "stick_breaking" | "stick-breaking" => Ok(Self::Sb),
            "alr" => Ok(Self::Alr),
            "mlr" => Ok(Self::Mlr),
            "sphere" => Ok(Self::Sphere),
            other => Err(Error::Config(format!("unknown bijection '{other}'"))),
        }
    }
}

/// A simplex-to-Euclidean bijection for a fixed number of parts.
#[derive(Debug, Clone)]
pub struct Bijection {
    kind: BijectionKind,
    parts: usize,
    helmert: Option<HelmertBasis>,
}

impl Bijection {
    pub fn new(kind: BijectionKind, parts: usize) -> Result<Self> {
        if !kind.is_flow_bijection() {
            return Err(Error::Config(format!("{kind} does not map to R^D")));
        }
        if parts < 2 {
            return Err(Error::InvalidDimension(format!("K = {parts} < 2")));
        }
        let helmert = match kind {
            BijectionKind::Ilr => Some(HelmertBasis::new(parts)?),
            _ => None,
        };
        Ok(Self { kind, parts, helmert })
    }

    pub fn kind(&self) -> BijectionKind {
        self.kind
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn dim(&self) -> usize {
        self.parts - 1
    }

    /// `z = phi(x)` and `log |det d z / d x_{1:D}|`.
    pub fn forward(&self, x: &Composition) -> Result<(EuclideanPoint, f64)> {
        ensure_len(self.parts, x.parts())?;
        match self.kind {
            BijectionKind::Ilr => ilr_with(self.helmert.as_ref().expect("ilr basis"), x),
            BijectionKind::Sb => stick_breaking(x),
            BijectionKind::Alr => alr(x),
            BijectionKind::Mlr => mlr(x),
            BijectionKind::Sphere => unreachable!("rejected in Bijection::new"),
        }
    }

    pub fn inverse(&self, z: &EuclideanPoint) -> Result<Composition> {
        ensure_len(self.dim(), z.dim())?;
        Composition::new(self.inverse_raw(z.values()))
    }

    /// `phi^{-1}(z)` without validating the result. Far out in `R^D` a part
    /// can underflow to zero, which `inverse` reports as a domain error.
    pub fn inverse_raw(&self, z: &[f64]) -> Vec<f64> {
        match self.kind {
            BijectionKind::Ilr => {
                softmax(&self.helmert.as_ref().expect("ilr basis").apply_transpose(z))
            }
            BijectionKind::Sb => stick_breaking_inv_raw(z),
            BijectionKind::Alr => alr_inv_raw(z),
            BijectionKind::Mlr => mlr_inv_raw(z),
            BijectionKind::Sphere => unreachable!("rejected in Bijection::new"),
        }
    }

    /// Closed-form log-Jacobian of the forward map at `x`.
    pub fn log_abs_det(&self, x: &Composition) -> f64 {
        let base = -x.values().iter().map(|v| v.ln()).sum::<f64>();
        match self.kind {
            BijectionKind::Ilr => base - 0.5 * (self.parts as f64).ln(),
            _ => base,
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|a| (a - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= sum);
    out
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Isometric logratio transform with the classical Helmert basis.
pub fn ilr(x: &Composition) -> Result<(EuclideanPoint, f64)> {
    ilr_with(&HelmertBasis::new(x.parts())?, x)
}

pub fn ilr_with(basis: &HelmertBasis, x: &Composition) -> Result<(EuclideanPoint, f64)> {
    ensure_len(basis.parts(), x.parts())?;
    let logs = x.ln();
    let z = basis.apply(&logs);
    let log_abs_det = -0.5 * (x.parts() as f64).ln() - logs.iter().sum::<f64>();
    Ok((EuclideanPoint::new(z)?, log_abs_det))
}

pub fn ilr_inv(z: &EuclideanPoint) -> Result<Composition> {
    ilr_inv_with(&HelmertBasis::new(z.dim() + 1)?, z)
}

pub fn ilr_inv_with(basis: &HelmertBasis, z: &EuclideanPoint) -> Result<Composition> {
    ensure_len(basis.dim(), z.dim())?;
    Composition::new(softmax(&basis.apply_transpose(z.values())))
}

/// Remainders `r_k = 1 - sum_{i <= k} x_i` for `k = 1..D`, accumulated from
/// the tail so small remainders keep full precision.
fn stick_remainders(x: &[f64]) -> Vec<f64> {
    let k = x.len();
    let mut rem = vec![0.0; k - 1];
    let mut acc = 0.0;
    for i in (1..k).rev() {
        acc += x[i];
        rem[i - 1] = acc;
    }
    rem
}

/// Multiplicative logratio `log(x_k / (1 - sum_{i<=k} x_i))`.
pub fn mlr(x: &Composition) -> Result<(EuclideanPoint, f64)> {
    let v = x.values();
    let rem = stick_remainders(v);
    if let Some(r) = rem.iter().find(|r| **r <= 0.0) {
        return Err(domain(format!("non-positive stick remainder {r}")));
    }
    let z = v.iter().zip(&rem).map(|(xk, rk)| (xk / rk).ln()).collect();
    let log_abs_det = -v.iter().map(|a| a.ln()).sum::<f64>();
    Ok((EuclideanPoint::new(z)?, log_abs_det))
}

fn mlr_inv_raw(z: &[f64]) -> Vec<f64> {
    // x_k = e^{z_k} / prod_{i<=k} (1 + e^{z_i}) = sigma(z_k) prod_{i<k} sigma(-z_i)
    let mut out = Vec::with_capacity(z.len() + 1);
    let mut stick = 1.0;
    for &zk in z {
        out.push(stick * sigmoid(zk));
        stick *= sigmoid(-zk);
    }
    out.push(stick);
    out
}

pub fn mlr_inv(z: &EuclideanPoint) -> Result<Composition> {
    Composition::new(mlr_inv_raw(z.values()))
}

/// Centered stick-breaking: `z_k = mlr(x)_k + log(K - k)`, so the uniform
/// composition maps to the origin.
pub fn stick_breaking(x: &Composition) -> Result<(EuclideanPoint, f64)> {
    let k = x.parts();
    let (m, log_abs_det) = mlr(x)?;
    let z = m
        .into_inner()
        .into_iter()
        .enumerate()
        .map(|(i, v)| v + ((k - i - 1) as f64).ln())
        .collect();
    Ok((EuclideanPoint::new(z)?, log_abs_det))
}

/// Unit-simplex recursion `x_k = (1 - sum_{i<k} x_i) sigma(y_k)` with
/// `y_k = z_k - log(K - k)`; the last part closes the sum.
fn stick_breaking_inv_raw(z: &[f64]) -> Vec<f64> {
    let k = z.len() + 1;
    let mut out = Vec::with_capacity(k);
    let mut remaining = 1.0;
    for (i, zk) in z.iter().enumerate() {
        let y = zk - ((k - i - 1) as f64).ln();
        let xk = remaining * sigmoid(y);
        out.push(xk);
        remaining -= xk;
    }
    out.push(remaining);
    out
}

pub fn stick_breaking_inv(z: &EuclideanPoint) -> Result<Composition> {
    Composition::new(stick_breaking_inv_raw(z.values()))
}

/// Product form of the stick-breaking inverse,
/// `x_k = prod_{i<k} (1 - sigma(y_i)) sigma(y_k)`.
pub fn stick_breaking_inv_product(z: &EuclideanPoint) -> Result<Composition> {
    let k = z.dim() + 1;
    let sig: Vec<f64> = z
        .values()
        .iter()
        .enumerate()
        .map(|(i, zk)| sigmoid(zk - ((k - i - 1) as f64).ln()))
        .collect();
    let mut out = Vec::with_capacity(k);
    for i in 0..k - 1 {
        let prefix: f64 = sig[..i].iter().map(|s| 1.0 - s).product();
        out.push(prefix * sig[i]);
    }
    out.push(sig.iter().map(|s| 1.0 - s).product());
    Composition::new(out)
}

/// Additive logratio against the last part.
pub fn alr(x: &Composition) -> Result<(EuclideanPoint, f64)> {
    let v = x.values();
    let last = v[v.len() - 1].ln();
    let z = v[..v.len() - 1].iter().map(|a| a.ln() - last).collect();
    let log_abs_det = -v.iter().map(|a| a.ln()).sum::<f64>();
    Ok((EuclideanPoint::new(z)?, log_abs_det))
}

fn alr_inv_raw(z: &[f64]) -> Vec<f64> {
    let mut padded = z.to_vec();
    padded.push(0.0);
    softmax(&padded)
}

pub fn alr_inv(z: &EuclideanPoint) -> Result<Composition> {
    Composition::new(alr_inv_raw(z.values()))
}

/// `z = sqrt(x)` on the positive orthant of the unit sphere, with the log of
/// the volume element `2^{-D} prod x_i^{-1/2}`.
pub fn sphere_map(x: &Composition) -> (Vec<f64>, f64) {
    let z = x.values().iter().map(|v| v.sqrt()).collect();
    let log_volume =
        -(x.dim() as f64) * std::f64::consts::LN_2 - 0.5 * x.values().iter().map(|v| v.ln()).sum::<f64>();
    (z, log_volume)
}

pub fn sphere_inv(z: &[f64]) -> Result<Composition> {
    Composition::new(z.iter().map(|v| v * v).collect())
}

/// `C(v) = v / sum(v)` for a positive vector.
pub fn closure(v: &[f64]) -> Result<Composition> {
    if let Some(bad) = v.iter().find(|a| !a.is_finite() || **a <= 0.0) {
        return Err(domain(format!("closure needs positive entries, got {bad}")));
    }
    let sum: f64 = v.iter().sum();
    Composition::new(v.iter().map(|a| a / sum).collect())
}

/// Aitchison addition `x (+) y = C(x_1 y_1, .., x_K y_K)`.
pub fn perturb(x: &Composition, y: &Composition) -> Result<Composition> {
    ensure_len(x.parts(), y.parts())?;
    closure(&x.values().iter().zip(y.values()).map(|(a, b)| a * b).collect::<Vec<_>>())
}

/// Aitchison subtraction `x (-) y = C(x_1 / y_1, .., x_K / y_K)`.
pub fn perturb_inv(x: &Composition, y: &Composition) -> Result<Composition> {
    ensure_len(x.parts(), y.parts())?;
    closure(&x.values().iter().zip(y.values()).map(|(a, b)| a / b).collect::<Vec<_>>())
}

/// `(1 / 2K) sum_{i,j} log(x_i / x_j) log(y_i / y_j)`.
pub fn aitchison_inner(x: &Composition, y: &Composition) -> Result<f64> {
    ensure_len(x.parts(), y.parts())?;
    let lx = x.ln();
    let ly = y.ln();
    let k = lx.len();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            acc += (lx[i] - lx[j]) * (ly[i] - ly[j]);
        }
    }
    Ok(acc / (2.0 * k as f64))
}

pub fn aitchison_norm(x: &Composition) -> f64 {
    aitchison_inner(x, x).expect("same K").max(0.0).sqrt()
}

pub fn aitchison_distance(x: &Composition, y: &Composition) -> Result<f64> {
    Ok(aitchison_norm(&perturb_inv(x, y)?))
}
