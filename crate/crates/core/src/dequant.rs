//! Dirichlet interpolation of categorical observations into the open simplex.
//!
//! A category `k` becomes `x = lambda e_k + (1 - lambda) eps` with
//! `eps ~ Dir(alpha, .., alpha)`. Each category then owns one shifted and
//! rescaled Dirichlet component, supported on `{x : x_k >= lambda}`; for
//! `lambda >= 1/2` those supports sit inside the argmax regions, so `argmax x`
//! recovers the category.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_len, Error, Result};
use crate::geometry::{log_sum_exp, softmax, Composition, MIN_COMPONENT};
use crate::special::ln_gamma;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpolationConfig {
    pub lambda: f64,
    /// Symmetric Dirichlet concentration. Ignored when `deterministic`.
    /// Infinite values are written to JSON as `null`.
    #[serde(with = "alpha_json")]
    pub alpha: f64,
    /// The `alpha -> infinity` limit: `eps` is the simplex centre.
    pub deterministic: bool,
    /// Divide Euclidean targets by the Aitchison norm of the mean compositions.
    pub scaling: bool,
}

mod alpha_json {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(alpha: &f64, s: S) -> Result<S::Ok, S::Error> {
        if alpha.is_finite() {
            s.serialize_f64(*alpha)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        Self { lambda: 0.5, alpha: 100.0, deterministic: false, scaling: false }
    }
}

impl InterpolationConfig {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        let cfg = Self { lambda, alpha, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn deterministic(lambda: f64) -> Result<Self> {
        let cfg = Self { lambda, alpha: f64::INFINITY, deterministic: true, scaling: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Parameter(format!("lambda = {} outside (0, 1]", self.lambda)));
        }
        if !self.deterministic && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!("alpha = {} must be positive and finite", self.alpha)));
        }
        if self.lambda < 0.5 {
            warn!("lambda = {} < 1/2: component supports overlap, argmax recovery is not guaranteed", self.lambda);
        }
        Ok(())
    }

    /// Alpha as a number, `+inf` for the deterministic limit.
    pub fn effective_alpha(&self) -> f64 {
        if self.deterministic {
            f64::INFINITY
        } else {
            self.alpha
        }
    }
}

/// A categorical law over `K` categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for CategoricalDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CategoricalDistribution> for Vec<f64> {
    fn from(c: CategoricalDistribution) -> Self {
        c.probs
    }
}

impl CategoricalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDimension("empty categorical distribution".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(domain(format!("probability {p} is not a finite non-negative number")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(domain(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(domain("weights must be non-negative with a positive sum"));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    /// Empirical law from category counts, each count padded by `smoothing`.
    pub fn from_counts(counts: &[usize], smoothing: f64) -> Result<Self> {
        let w: Vec<f64> = counts.iter().map(|&c| c as f64 + smoothing).collect();
        Self::from_weights(&w)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn categories(&self) -> usize {
        self.probs.len()
    }

    /// Draws a category by inversion.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// `ln G` for `G ~ Gamma(shape, 1)` by Marsaglia-Tsang; shapes below one use
/// `G(a) = G(a + 1) U^{1/a}`, kept in log space so tiny draws do not underflow.
pub fn sample_ln_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        return sample_ln_gamma(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.gen();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return (d * v).ln();
        }
    }
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    sample_ln_gamma(shape, rng).exp()
}

/// `eps ~ Dir(alpha, .., alpha)` over `K` parts via normalized gamma draws.
///
/// A draw with a part below the composition floor (possible only for very
/// small `alpha`) is redrawn.
pub fn sample_symmetric_dirichlet<R: Rng + ?Sized>(alpha: f64, parts: usize, rng: &mut R) -> Result<Composition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("alpha = {alpha} must be positive and finite")));
    }
    if parts < 2 {
        return Err(Error::InvalidDimension(format!("K = {parts} < 2")));
    }
    let mut logs = vec![0.0; parts];
    loop {
        logs.iter_mut().for_each(|l| *l = sample_ln_gamma(alpha, rng));
        let x = softmax(&logs);
        if x.iter().all(|v| *v >= MIN_COMPONENT) {
            return Composition::new(x);
        }
    }
}

/// `lambda e_k + (1 - lambda) eps` with a fresh `eps` on every call.
///
/// `lambda = 1` yields the vertex `e_k`, which is not in the open simplex and
/// is reported as a domain error.
pub fn interpolate<R: Rng + ?Sized>(
    category: usize,
    parts: usize,
    cfg: &InterpolationConfig,
    rng: &mut R,
) -> Result<Composition> {
    cfg.validate()?;
    if category >= parts {
        return Err(Error::Parameter(format!("category {category} out of range for K = {parts}")));
    }
    let eps = if cfg.deterministic {
        vec![1.0 / parts as f64; parts]
    } else {
        sample_symmetric_dirichlet(cfg.alpha, parts, rng)?.into_inner()
    };
    let mut x: Vec<f64> = eps.iter().map(|e| (1.0 - cfg.lambda) * e).collect();
    x[category] += cfg.lambda;
    Composition::new(x)
}

/// Index (0-based) of the largest entry; ties go to the lowest index.
pub fn argmax_category(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Log-density of `Dir(alphas)` at `y`, over the first `K - 1` coordinates.
/// `-inf` outside the open simplex.
pub fn dirichlet_logpdf(y: &[f64], alphas: &[f64]) -> Result<f64> {
    ensure_len(alphas.len(), y.len())?;
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::Parameter(format!("alpha = {a} must be positive and finite")));
    }
    if y.iter().any(|v| !(*v > 0.0)) {
        return Ok(f64::NEG_INFINITY);
    }
    let total: f64 = alphas.iter().sum();
    let norm = ln_gamma(total) - alphas.iter().map(|a| ln_gamma(*a)).sum::<f64>();
    Ok(norm + y.iter().zip(alphas).map(|(v, a)| (a - 1.0) * v.ln()).sum::<f64>())
}

/// `log q_lambda(x | e_k)` for a general concentration vector.
pub fn component_logpdf_with(x: &[f64], category: usize, lambda: f64, alphas: &[f64]) -> Result<f64> {
    ensure_len(alphas.len(), x.len())?;
    if category >= x.len() {
        return Err(Error::Parameter(format!("category {category} out of range for K = {}", x.len())));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Parameter(format!("component density needs lambda in (0, 1), got {lambda}")));
    }
    let scale = 1.0 - lambda;
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| if i == category { (v - lambda) / scale } else { v / scale })
        .collect();
    let d = (x.len() - 1) as f64;
    Ok(-d * scale.ln() + dirichlet_logpdf(&y, alphas)?)
}

/// `log q_lambda(x | e_k) = -D log(1 - lambda) + log Dir((x - lambda e_k) / (1 - lambda); alpha)`,
/// `-inf` where `x_k <= lambda`.
pub fn component_logpdf(x: &Composition, category: usize, cfg: &InterpolationConfig) -> Result<f64> {
    if cfg.deterministic {
        return Err(Error::Parameter("the deterministic interpolation has no density".into()));
    }
    cfg.validate()?;
    component_logpdf_with(x.values(), category, cfg.lambda, &vec![cfg.alpha; x.parts()])
}

/// `log sum_k p_k q_lambda(x | e_k)`.
pub fn mixture_logpdf(x: &Composition, p: &CategoricalDistribution, cfg: &InterpolationConfig) -> Result<f64> {
    ensure_len(p.categories(), x.parts())?;
    if cfg.lambda < 0.5 {
        warn!("mixture density with lambda = {} < 1/2 has overlapping supports", cfg.lambda);
    }
    let terms = p
        .probs()
        .iter()
        .enumerate()
        .map(|(k, pk)| Ok(pk.ln() + component_logpdf(x, k, cfg)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_sum_exp(&terms))
}

/// `mu^(k) = lambda e_k + (1 - lambda) / K`, the mean of component `k`.
pub fn mean_composition(category: usize, lambda: f64, parts: usize) -> Result<Composition> {
    if category >= parts {
        return Err(Error::Parameter(format!("category {category} out of range for K = {parts}")));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Parameter(format!("lambda = {lambda} outside (0, 1)")));
    }
    let mut x = vec![(1.0 - lambda) / parts as f64; parts];
    x[category] += lambda;
    Composition::new(x)
}

/// `||mu^(k)||_A = sqrt(D / K) log(1 + K lambda / (1 - lambda))`, the same for every `k`.
pub fn mean_aitchison_norm(lambda: f64, parts: usize) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Parameter(format!("lambda = {lambda} is degenerate for the mean norm")));
    }
    if parts < 2 {
        return Err(Error::InvalidDimension(format!("K = {parts} < 2")));
    }
    let k = parts as f64;
    Ok(((k - 1.0) / k).sqrt() * (1.0 + k * lambda / (1.0 - lambda)).ln())
}
