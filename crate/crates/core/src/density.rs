//! Sampling, log-densities on the simplex, and categorical probabilities
//! recovered from the continuous model.
//!
//! Sign convention for densities: the augmented state `(z, l)` starts at
//! `z(1) = phi(x)`, `l(1) = 0` and follows `dz/dt = v(z, t)`,
//! `dl/dt = div v(z, t)` backwards to `t = 0`. Then
//! `l(0) = -int_0^1 div v dt` and
//! `log q(x) = log p_0(z(0)) + l(0) + log |det dphi/dx|`.

use log::warn;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dequant::{argmax_category, component_logpdf, mean_composition, CategoricalDistribution};
use crate::error::{ensure_len, Error, Result};
use crate::geometry::{Composition, MIN_COMPONENT, SUM_TOLERANCE};
use crate::model::{project_to_simplex, CoordinateMap, Coordinates, ModelSpec};
use crate::nn::VelocityField;
use crate::ode::{integrate, solve, Direction, SolverConfig};

/// Largest flow dimension for which `Auto` uses the exact divergence.
pub const EXACT_DIVERGENCE_MAX_DIM: usize = 32;
pub const DEFAULT_PROBES: usize = 8;
/// Trajectories integrated together; fixed so results do not depend on the
/// thread count.
pub const CHUNK_SIZE: usize = 512;
/// Pseudo-count added to every category of an empirical distribution.
pub const EMPIRICAL_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DivergenceConfig {
    Exact,
    /// Rademacher probes `e^T J e`, averaged.
    Hutchinson {
        #[serde(default = "default_probes")]
        probes: usize,
    },
    /// Exact up to [`EXACT_DIVERGENCE_MAX_DIM`], Hutchinson with the default
    /// probe count above.
    #[default]
    Auto,
}

fn default_probes() -> usize {
    DEFAULT_PROBES
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DivergenceConfig::Hutchinson { probes: 0 } => Err(Error::Config("need at least one probe".into())),
            _ => Ok(()),
        }
    }

    /// `None` for exact, otherwise the probe count.
    fn resolve(&self, dim: usize) -> Option<usize> {
        match *self {
            DivergenceConfig::Exact => None,
            DivergenceConfig::Hutchinson { probes } => Some(probes),
            DivergenceConfig::Auto if dim <= EXACT_DIVERGENCE_MAX_DIM => None,
            DivergenceConfig::Auto => Some(DEFAULT_PROBES),
        }
    }
}

/// `probes` matrices of i.i.d. signs, each `n x d`.
pub fn rademacher_probes<R: Rng + ?Sized>(n: usize, d: usize, probes: usize, rng: &mut R) -> Vec<Array2<f64>> {
    (0..probes)
        .map(|_| Array2::from_shape_simple_fn((n, d), || if rng.gen::<bool>() { 1.0 } else { -1.0 }))
        .collect()
}

/// Velocities and divergences for each row of `z`. With `probes` empty the
/// divergence is the exact trace from `D` vector-Jacobian products.
pub fn velocity_and_divergence(
    field: &VelocityField,
    z: ArrayView2<f64>,
    t: f64,
    probes: &[Array2<f64>],
) -> Result<(Array2<f64>, Vec<f64>)> {
    let (n, d) = z.dim();
    let tvec = vec![t; n];
    let (v, cache) = field.forward_cached(z, &tvec)?;
    let mut div = vec![0.0; n];
    if probes.is_empty() {
        let mut unit = Array2::zeros((n, d));
        for i in 0..d {
            unit.column_mut(i).fill(1.0);
            let g = field.input_vjp(&cache, unit.view())?;
            div.iter_mut().zip(g.column(i)).for_each(|(acc, gi)| *acc += gi);
            unit.column_mut(i).fill(0.0);
        }
    } else {
        for eps in probes {
            ensure_len(n, eps.nrows())?;
            let g = field.input_vjp(&cache, eps.view())?;
            for (r, acc) in div.iter_mut().enumerate() {
                *acc += g.row(r).dot(&eps.row(r));
            }
        }
        let m = probes.len() as f64;
        div.iter_mut().for_each(|v| *v /= m);
    }
    Ok((v, div))
}

/// `div v(z, t)` at one point.
pub fn divergence<R: Rng + ?Sized>(
    field: &VelocityField,
    z: &[f64],
    t: f64,
    cfg: &DivergenceConfig,
    rng: &mut R,
) -> Result<f64> {
    cfg.validate()?;
    let zm = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Domain(e.to_string()))?;
    let probes = match cfg.resolve(z.len()) {
        None => Vec::new(),
        Some(m) => rademacher_probes(1, z.len(), m, rng),
    };
    Ok(velocity_and_divergence(field, zm, t, &probes)?.1[0])
}

/// Generated compositions and, for discrete models, their categories.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub compositions: Vec<Composition>,
    pub categories: Option<Vec<usize>>,
    /// Outputs that needed projection to become valid compositions: negative
    /// parts from linear coordinates, or underflowed parts.
    pub projected: usize,
}

impl SampleBatch {
    pub fn category_counts(&self, parts: usize) -> Option<Vec<usize>> {
        self.categories.as_ref().map(|cs| {
            let mut counts = vec![0; parts];
            cs.iter().for_each(|&c| counts[c] += 1);
            counts
        })
    }
}

fn into_composition(raw: Vec<f64>) -> (Composition, bool) {
    let sum: f64 = raw.iter().sum();
    let fine = raw.iter().all(|v| *v >= MIN_COMPONENT && v.is_finite()) && (sum - 1.0).abs() <= SUM_TOLERANCE;
    if fine {
        if let Ok(c) = Composition::new(raw.clone()) {
            return (c, false);
        }
    }
    let fixed: Vec<f64> = project_to_simplex(&raw).into_iter().map(|v| v.max(MIN_COMPONENT)).collect();
    let s: f64 = fixed.iter().sum();
    let c = Composition::new(fixed.iter().map(|v| v / s).collect()).expect("projected point is interior");
    (c, true)
}

/// Draws `z0` from the base, transports it to `t = 1` and maps back to the
/// simplex; discrete models also report `argmax`.
pub fn sample(
    field: &VelocityField,
    spec: &ModelSpec,
    n: usize,
    solver: &SolverConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampleBatch> {
    solver.validate()?;
    let coords = spec.coordinates()?;
    ensure_len(coords.dim(), field.dim())?;
    let z0 = spec.base.sample(&coords, n, rng)?;
    let z1 = transport(field, z0.view(), solver)?;
    let mut compositions = Vec::with_capacity(n);
    let mut projected = 0;
    for row in z1.rows() {
        let raw = coords.to_simplex_unprojected(row.as_slice().expect("contiguous row"));
        let (c, fixed) = into_composition(raw);
        projected += fixed as usize;
        compositions.push(c);
    }
    let categories = spec.is_discrete.then(|| compositions.iter().map(|c| argmax_category(c.values())).collect());
    Ok(SampleBatch { compositions, categories, projected })
}

/// Forward transport of many base points, in fixed-size parallel chunks.
pub fn transport(field: &VelocityField, z0: ArrayView2<f64>, solver: &SolverConfig) -> Result<Array2<f64>> {
    let (n, d) = z0.dim();
    let chunks: Vec<usize> = (0..n).step_by(CHUNK_SIZE).collect();
    let parts = chunks
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK_SIZE).min(n);
            integrate(field, z0.slice(ndarray::s![s..e, ..]), Direction::Forward, solver)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((n, d));
    for (&s, part) in chunks.iter().zip(parts) {
        out.slice_mut(ndarray::s![s..s + part.nrows(), ..]).assign(&part);
    }
    Ok(out)
}

/// `log q_theta(x)` on the simplex for each point.
pub fn log_density_simplex(
    field: &VelocityField,
    spec: &ModelSpec,
    xs: &[Composition],
    solver: &SolverConfig,
    div: &DivergenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let coords = spec.coordinates()?;
    log_density_with(field, &coords, spec, xs, solver, div, rng)
}

fn log_density_with(
    field: &VelocityField,
    coords: &Coordinates,
    spec: &ModelSpec,
    xs: &[Composition],
    solver: &SolverConfig,
    div: &DivergenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    solver.validate()?;
    div.validate()?;
    let d = coords.dim();
    ensure_len(d, field.dim())?;
    let mut z1 = Vec::with_capacity(xs.len());
    let mut log_det = Vec::with_capacity(xs.len());
    for x in xs {
        ensure_len(coords.parts(), x.parts())?;
        z1.push(coords.to_flow(x)?);
        log_det.push(coords.log_abs_det(x));
    }
    // Probes are drawn up front, per point, and held fixed along the path.
    let n_probes = div.resolve(d);
    let chunk_starts: Vec<usize> = (0..xs.len()).step_by(CHUNK_SIZE).collect();
    let probes: Vec<Vec<Array2<f64>>> = chunk_starts
        .iter()
        .map(|&s| {
            let m = (s + CHUNK_SIZE).min(xs.len()) - s;
            n_probes.map_or_else(Vec::new, |p| rademacher_probes(m, d, p, rng))
        })
        .collect();
    let results = chunk_starts
        .par_iter()
        .zip(probes.par_iter())
        .map(|(&s, probes)| {
            let e = (s + CHUNK_SIZE).min(xs.len());
            let m = e - s;
            let block = d + 1;
            let mut y0 = vec![0.0; m * block];
            for (j, z) in z1[s..e].iter().enumerate() {
                y0[j * block..j * block + d].copy_from_slice(z);
            }
            let mut zbuf = Array2::zeros((m, d));
            let sol = solve(
                |t, y, dy| {
                    for j in 0..m {
                        zbuf.row_mut(j).as_slice_mut().expect("row").copy_from_slice(&y[j * block..j * block + d]);
                    }
                    let (v, dv) = velocity_and_divergence(field, zbuf.view(), t, probes)?;
                    for j in 0..m {
                        dy[j * block..j * block + d].copy_from_slice(v.row(j).as_slice().expect("row"));
                        dy[j * block + d] = dv[j];
                    }
                    Ok(())
                },
                &y0,
                1.0,
                0.0,
                block,
                solver,
            )?;
            Ok((0..m)
                .map(|j| {
                    let z0 = &sol.state[j * block..j * block + d];
                    let l0 = sol.state[j * block + d];
                    spec.base.log_density(coords, z0) + l0 + log_det[s + j]
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// One category's estimate: `p_hat = q_theta(mu) / q_lambda(mu | e_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub k: usize,
    pub mu: Vec<f64>,
    pub log_q_theta: f64,
    pub log_q_component: f64,
    pub p_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEstimate {
    pub records: Vec<EstimateRecord>,
    /// Raw ratios; they need not sum to one.
    pub raw: Vec<f64>,
    pub normalized: CategoricalDistribution,
}

/// Evaluates the ratio estimator with any density `log_q` on the simplex.
pub fn estimate_categorical<F>(spec: &ModelSpec, log_q: F) -> Result<CategoricalEstimate>
where
    F: FnOnce(&[Composition]) -> Result<Vec<f64>>,
{
    if !spec.is_discrete {
        return Err(Error::Config("categorical probabilities need a discrete model".into()));
    }
    let cfg = &spec.interpolation;
    if cfg.deterministic {
        return Err(Error::Parameter("the deterministic interpolation has no component density".into()));
    }
    if cfg.alpha <= 1.0 {
        warn!("alpha = {} <= 1: component modes are not at the means, the estimate is unreliable", cfg.alpha);
    }
    let mus = (0..spec.parts)
        .map(|k| mean_composition(k, cfg.lambda, spec.parts))
        .collect::<Result<Vec<_>>>()?;
    let log_theta = log_q(&mus)?;
    ensure_len(spec.parts, log_theta.len())?;
    let mut records = Vec::with_capacity(spec.parts);
    for (k, (mu, lq)) in mus.iter().zip(&log_theta).enumerate() {
        let lc = component_logpdf(mu, k, cfg)?;
        records.push(EstimateRecord {
            k,
            mu: mu.values().to_vec(),
            log_q_theta: *lq,
            log_q_component: lc,
            p_hat: (lq - lc).exp(),
        });
    }
    let log_ratios: Vec<f64> = records.iter().map(|r| r.log_q_theta - r.log_q_component).collect();
    let lse = crate::geometry::log_sum_exp(&log_ratios);
    if !lse.is_finite() {
        return Err(Error::Domain("estimated probabilities cannot be normalized".into()));
    }
    let normalized = CategoricalDistribution::from_weights(&log_ratios.iter().map(|l| (l - lse).exp()).collect::<Vec<_>>())?;
    let raw = records.iter().map(|r| r.p_hat).collect();
    Ok(CategoricalEstimate { records, raw, normalized })
}

pub fn categorical_probabilities(
    field: &VelocityField,
    spec: &ModelSpec,
    solver: &SolverConfig,
    div: &DivergenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CategoricalEstimate> {
    if spec.coordinates == CoordinateMap::Linear {
        return Err(Error::Config("linear coordinates have no density on the open simplex".into()));
    }
    estimate_categorical(spec, |mus| log_density_simplex(field, spec, mus, solver, div, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `KL(p || p_hat)` in nats.
    pub kl: f64,
    pub tv: f64,
}

/// `sum_k p_k log(p_k / q_k)`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_len(p.len(), q.len())?;
    Ok(p.iter().zip(q).filter(|(pk, _)| **pk > 0.0).map(|(pk, qk)| pk * (pk / qk).ln()).sum())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_len(p.len(), q.len())?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

pub fn eval_metrics(estimate: &CategoricalDistribution, truth: &CategoricalDistribution) -> Result<Metrics> {
    ensure_len(truth.categories(), estimate.categories())?;
    Ok(Metrics {
        kl: kl_divergence(truth.probs(), estimate.probs())?,
        tv: total_variation(truth.probs(), estimate.probs())?,
    })
}

pub fn empirical_distribution(categories: &[usize], parts: usize) -> Result<CategoricalDistribution> {
    let mut counts = vec![0usize; parts];
    for &c in categories {
        if c >= parts {
            return Err(Error::Parameter(format!("category {c} out of range for K = {parts}")));
        }
        counts[c] += 1;
    }
    CategoricalDistribution::from_counts(&counts, EMPIRICAL_SMOOTHING)
}
