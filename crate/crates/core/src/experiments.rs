//! Grid experiments: train, sample, score, write one CSV row per grid point
//! and a JSON manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    checkerboard_invalid_fraction, gen_checkerboard_simplex, gen_random_categorical, sample_categories,
    CheckerboardLayout, CHECKERBOARD,
};
use crate::density::{categorical_probabilities, empirical_distribution, eval_metrics, sample, DivergenceConfig};
use crate::dequant::InterpolationConfig;
use crate::error::{Error, Result};
use crate::flow::{train, Coupling, TrainConfig, TrainData, TrainedModel};
use crate::model::{BaseDistribution, CoordinateMap};
use crate::ode::SolverConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_HEADER: &str = "experiment,index,seed,parts,lambda,alpha,bijection,coupling,scaling,status,\
kl,tv,est_kl,est_tv,est_raw_sum,invalid_fraction,projected,final_loss,error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Checkerboard,
    Scalability,
    EstimatorAccuracy,
    ParamAblation,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Checkerboard => "checkerboard",
            ExperimentKind::Scalability => "scalability",
            ExperimentKind::EstimatorAccuracy => "estimator_accuracy",
            ExperimentKind::ParamAblation => "param_ablation",
        }
    }
}

/// Axes of the grid; every combination is one run. `alpha = null` is the
/// deterministic interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub parts: Vec<usize>,
    pub lambda: Vec<f64>,
    pub alpha: Vec<Option<f64>>,
    pub bijection: Vec<CoordinateMap>,
    pub coupling: Vec<Coupling>,
    pub scaling: Vec<bool>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            parts: vec![2],
            lambda: vec![0.5],
            alpha: vec![Some(100.0)],
            bijection: vec![CoordinateMap::Ilr],
            coupling: vec![Coupling::Independent],
            scaling: vec![false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    pub grid: Grid,
    pub seeds: Vec<u64>,
    /// Settings shared by every run; the grid overrides its axes.
    pub train: TrainConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub solver: SolverConfig,
    /// Also run the ratio estimator (always on for `estimator_accuracy`).
    pub estimator: bool,
    pub density_solver: SolverConfig,
    pub divergence: DivergenceConfig,
    /// Largest `K` accepted by the scalability experiment.
    pub max_parts: usize,
    /// Base used by linear-coordinate runs.
    pub linear_base: BaseDistribution,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Scalability,
            grid: Grid::default(),
            seeds: vec![0],
            train: TrainConfig::default(),
            train_samples: 200_000,
            eval_samples: 20_000,
            solver: SolverConfig::default(),
            estimator: false,
            density_solver: SolverConfig::dopri5(1e-5, 1e-5),
            divergence: DivergenceConfig::Auto,
            max_parts: 512,
            linear_base: BaseDistribution::UniformSimplex,
            output_dir: None,
        }
    }
}

/// One fully specified run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub index: usize,
    pub seed: u64,
    pub parts: usize,
    pub lambda: f64,
    pub alpha: Option<f64>,
    pub bijection: CoordinateMap,
    pub coupling: Coupling,
    pub scaling: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub kl: Option<f64>,
    pub tv: Option<f64>,
    pub est_kl: Option<f64>,
    pub est_tv: Option<f64>,
    pub est_raw_sum: Option<f64>,
    pub invalid_fraction: Option<f64>,
    pub projected: Option<usize>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub point: GridPoint,
    pub metrics: RunMetrics,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub artifact_version: String,
    pub seeds: Vec<u64>,
    pub runs: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkerboard: Option<CheckerboardLayout>,
    pub metrics_file: String,
    pub spec: ExperimentSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub records: Vec<RunRecord>,
    pub manifest: Manifest,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.parts.is_empty()
            || g.lambda.is_empty()
            || g.alpha.is_empty()
            || g.bijection.is_empty()
            || g.coupling.is_empty()
            || g.scaling.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::Config("every grid axis and the seed list must be nonempty".into()));
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if let Some(k) = g.parts.iter().find(|&&k| k < 2) {
            return Err(Error::Config(format!("K = {k} < 2")));
        }
        if self.experiment == ExperimentKind::Scalability {
            if let Some(k) = g.parts.iter().find(|k| !k.is_power_of_two() || **k > self.max_parts) {
                return Err(Error::Config(format!("scalability needs powers of two up to {}, got K = {k}", self.max_parts)));
            }
        }
        self.solver.validate()?;
        self.density_solver.validate()?;
        self.divergence.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn grid_points(&self) -> Vec<GridPoint> {
        let g = &self.grid;
        let parts: Vec<usize> = if self.experiment == ExperimentKind::Checkerboard { vec![3] } else { g.parts.clone() };
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &k in &parts {
                for &lambda in &g.lambda {
                    for &alpha in &g.alpha {
                        for &bijection in &g.bijection {
                            for &coupling in &g.coupling {
                                for &scaling in &g.scaling {
                                    out.push(GridPoint {
                                        index: out.len(),
                                        seed,
                                        parts: k,
                                        lambda,
                                        alpha,
                                        bijection,
                                        coupling,
                                        scaling,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn train_config(&self, p: &GridPoint) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        cfg.seed = derive_seed(p.seed, p.index as u64, 1);
        cfg.bijection = p.bijection;
        cfg.coupling = p.coupling;
        cfg.is_discrete = self.experiment != ExperimentKind::Checkerboard;
        if p.bijection == CoordinateMap::Linear {
            cfg.base = self.linear_base;
        }
        let mut interp = match p.alpha {
            Some(a) => InterpolationConfig::new(p.lambda, a)?,
            None => InterpolationConfig::deterministic(p.lambda)?,
        };
        interp.scaling = p.scaling;
        cfg.interpolation = interp;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// SplitMix64 finalizer over `(seed, index, stream)`: stable per-run seeds.
pub fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_point(spec: &ExperimentSpec, p: &GridPoint) -> Result<RunMetrics> {
    let cfg = spec.train_config(p)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, p.index as u64, 0));
    let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, p.index as u64, 2));
    let mut m = RunMetrics::default();
    if spec.experiment == ExperimentKind::Checkerboard {
        let xs = gen_checkerboard_simplex(spec.train_samples, &mut data_rng)?;
        let model = train(&TrainData::Compositional(xs), &cfg)?;
        m.final_loss = final_loss(&model);
        let s = sample(&model.field, &model.spec, spec.eval_samples, &spec.solver, &mut eval_rng)?;
        m.invalid_fraction = Some(checkerboard_invalid_fraction(&s.compositions)?);
        m.projected = Some(s.projected);
        return Ok(m);
    }
    let truth = gen_random_categorical(p.parts, &mut data_rng)?;
    let labels = sample_categories(&truth, spec.train_samples, &mut data_rng);
    let model = train(&TrainData::Categorical { parts: p.parts, labels }, &cfg)?;
    m.final_loss = final_loss(&model);
    let s = sample(&model.field, &model.spec, spec.eval_samples, &spec.solver, &mut eval_rng)?;
    let cats = s.categories.as_ref().expect("discrete model");
    let sampled = eval_metrics(&empirical_distribution(cats, p.parts)?, &truth)?;
    m.kl = Some(sampled.kl);
    m.tv = Some(sampled.tv);
    m.projected = Some(s.projected);
    let want_estimate = spec.estimator || spec.experiment == ExperimentKind::EstimatorAccuracy;
    if want_estimate && p.alpha.is_some() && p.bijection != CoordinateMap::Linear {
        let est = categorical_probabilities(&model.field, &model.spec, &spec.density_solver, &spec.divergence, &mut eval_rng)?;
        let em = eval_metrics(&est.normalized, &truth)?;
        m.est_kl = Some(em.kl);
        m.est_tv = Some(em.tv);
        m.est_raw_sum = Some(est.raw.iter().sum());
    }
    Ok(m)
}

fn final_loss(model: &TrainedModel) -> Option<f64> {
    let l = model.log.losses();
    let tail = &l[l.len().saturating_sub(100)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Runs every grid point (in parallel); failures are recorded per point and
/// do not stop the others. Output depends only on the spec.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let points = spec.grid_points();
    Ok(points
        .par_iter()
        .map(|p| {
            let r = run_point(spec, p);
            match &r {
                Ok(m) => info!("{} #{}: {:?}", spec.experiment.name(), p.index, m),
                Err(e) => warn!("{} #{} failed: {e}", spec.experiment.name(), p.index),
            }
            match r {
                Ok(metrics) => RunRecord { point: p.clone(), metrics, error: None },
                Err(e) => RunRecord { point: p.clone(), metrics: RunMetrics::default(), error: Some(e.to_string()) },
            }
        })
        .collect())
}

/// Runs the experiment and writes `metrics.csv` and `manifest.json` to `out`.
pub fn run_experiment_to(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentReport> {
    let records = run_experiment(spec)?;
    std::fs::create_dir_all(out)?;
    write_metrics_csv(&records, spec.experiment, &out.join(METRICS_FILE))?;
    let manifest = Manifest {
        experiment: spec.experiment,
        config_hash: spec.config_hash(),
        artifact_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        seeds: spec.seeds.clone(),
        runs: records.len(),
        failures: records.iter().filter(|r| !r.ok()).count(),
        checkerboard: (spec.experiment == ExperimentKind::Checkerboard).then_some(CHECKERBOARD),
        metrics_file: METRICS_FILE.to_string(),
        spec: spec.clone(),
    };
    let f = std::io::BufWriter::new(std::fs::File::create(out.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(ExperimentReport { records, manifest })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_metrics_csv(records: &[RunRecord], kind: ExperimentKind, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        let p = &r.point;
        let m = &r.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            kind.name(),
            p.index,
            p.seed,
            p.parts,
            p.lambda,
            p.alpha.map_or_else(|| "inf".to_string(), |a| a.to_string()),
            p.bijection,
            match p.coupling {
                Coupling::Independent => "independent",
                Coupling::MinibatchOt => "minibatch_ot",
            },
            p.scaling,
            if r.ok() { "ok" } else { "failed" },
            opt(m.kl),
            opt(m.tv),
            opt(m.est_kl),
            opt(m.est_tv),
            opt(m.est_raw_sum),
            opt(m.invalid_fraction),
            opt(m.projected),
            opt(m.final_loss),
            csv_escape(r.error.as_deref().unwrap_or("")),
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_enumeration() {
        let spec = ExperimentSpec {
            grid: Grid { parts: vec![2, 4], lambda: vec![0.5, 0.75], ..Grid::default() },
            seeds: vec![1, 2],
            ..ExperimentSpec::default()
        };
        let pts = spec.grid_points();
        assert_eq!(pts.len(), 8);
        assert!(pts.iter().enumerate().all(|(i, p)| p.index == i));
    }

    #[test]
    fn spec_validation() {
        let bad = r#"{"experiment": "scalability", "grid": {"parts": [3]}}"#;
        assert!(ExperimentSpec::from_json(bad).is_err());
        let ok = r#"{"experiment": "param_ablation", "grid": {"parts": [8], "alpha": [1, null]}}"#;
        let spec = ExperimentSpec::from_json(ok).unwrap();
        assert_eq!(spec.grid.alpha, vec![Some(1.0), None]);
        assert!(ExperimentSpec::from_json(r#"{"seeds": []}"#).is_err());
    }

    #[test]
    fn seeds_differ_per_point() {
        assert_ne!(derive_seed(0, 0, 0), derive_seed(0, 1, 0));
        assert_ne!(derive_seed(0, 0, 0), derive_seed(0, 0, 1));
        assert_eq!(derive_seed(5, 3, 1), derive_seed(5, 3, 1));
    }
}
