//! Conditional flow matching on linear paths in Euclidean coordinates, sample
//! couplings, and the training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::dequant::{interpolate, InterpolationConfig};
use crate::error::{ensure_len, Error, Result};
use crate::geometry::Composition;
use crate::model::{BaseDistribution, CoordinateMap, ModelCheckpoint, ModelSpec};
use crate::nn::{FieldConfig, Gradients, VelocityField, DEFAULT_EMBED_DIM, DEFAULT_TIME_SCALE};
use crate::ot::{hungarian, MAX_ASSIGNMENT_SIZE};

/// One point on the straight path from `z0` to `z1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub t: f64,
    pub zt: Vec<f64>,
    pub ut: Vec<f64>,
}

pub fn linear_path(z0: &[f64], z1: &[f64], t: f64) -> Result<PathSample> {
    ensure_len(z0.len(), z1.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("path time {t} outside [0, 1]")));
    }
    let zt = z0.iter().zip(z1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let ut = z0.iter().zip(z1).map(|(a, b)| b - a).collect();
    Ok(PathSample { z0: z0.to_vec(), z1: z1.to_vec(), t, zt, ut })
}

/// Base draws `z0` paired row by row with data `z1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub z0: Array2<f64>,
    pub z1: Array2<f64>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.z0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z0.nrows() == 0
    }

    pub fn transport_cost(&self) -> f64 {
        (&self.z1 - &self.z0).mapv(|v| v * v).sum()
    }
}

fn check_batches(z0: &ArrayView2<f64>, z1: &ArrayView2<f64>) -> Result<()> {
    ensure_len(z0.nrows(), z1.nrows())?;
    ensure_len(z0.ncols(), z1.ncols())
}

pub fn couple_independent(z0: ArrayView2<f64>, z1: ArrayView2<f64>) -> Result<PairedBatch> {
    check_batches(&z0, &z1)?;
    Ok(PairedBatch { z0: z0.to_owned(), z1: z1.to_owned() })
}

/// Reorders `z0` by the permutation minimizing `sum_i |z1_i - z0_sigma(i)|^2`.
pub fn couple_minibatch_ot(z0: ArrayView2<f64>, z1: ArrayView2<f64>) -> Result<PairedBatch> {
    check_batches(&z0, &z1)?;
    let n = z0.nrows();
    if n > MAX_ASSIGNMENT_SIZE {
        return Err(Error::Config(format!("OT coupling supports at most {MAX_ASSIGNMENT_SIZE} pairs, got {n}")));
    }
    let mut cost = Vec::with_capacity(n * n);
    for a in z1.rows() {
        for b in z0.rows() {
            cost.push(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    let sigma = hungarian(&cost, n)?;
    Ok(PairedBatch { z0: z0.select(Axis(0), &sigma), z1: z1.to_owned() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    Independent,
    MinibatchOt,
}

impl Coupling {
    pub fn pair(self, z0: ArrayView2<f64>, z1: ArrayView2<f64>) -> Result<PairedBatch> {
        match self {
            Coupling::Independent => couple_independent(z0, z1),
            Coupling::MinibatchOt => couple_minibatch_ot(z0, z1),
        }
    }
}

/// Mean squared error between `v(z_t, t)` and `z1 - z0`, with its parameter
/// gradients.
pub fn cfm_loss(field: &VelocityField, batch: &PairedBatch, t: &[f64]) -> Result<(f64, Gradients)> {
    let n = batch.len();
    ensure_len(n, t.len())?;
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let tcol = ndarray::ArrayView2::from_shape((n, 1), t).expect("column");
    let zt = &batch.z0 * &(1.0 - &tcol) + &batch.z1 * &tcol;
    let ut = &batch.z1 - &batch.z0;
    let (v, cache) = field.forward_cached(zt.view(), t)?;
    let resid = v - ut;
    let loss = resid.mapv(|r| r * r).sum() / n as f64;
    let upstream = resid * (2.0 / n as f64);
    let (grads, _) = field.backward(&cache, upstream.view())?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub bijection: CoordinateMap,
    pub interpolation: InterpolationConfig,
    pub coupling: Coupling,
    pub base: BaseDistribution,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub is_discrete: bool,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub time_scale: f64,
    /// Record the loss every this many steps (1 = every step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bijection: CoordinateMap::Ilr,
            interpolation: InterpolationConfig::default(),
            coupling: Coupling::Independent,
            base: BaseDistribution::StandardNormal,
            batch_size: 256,
            steps: 10_000,
            optimizer: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            is_discrete: true,
            hidden: vec![512; 4],
            embed_dim: DEFAULT_EMBED_DIM,
            time_scale: DEFAULT_TIME_SCALE,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || (self.coupling == Coupling::MinibatchOt && self.batch_size < 2) {
            return Err(Error::Config(format!("batch size {} too small for {:?} coupling", self.batch_size, self.coupling)));
        }
        if self.coupling == Coupling::MinibatchOt && self.batch_size > MAX_ASSIGNMENT_SIZE {
            return Err(Error::Config(format!("OT batch size must be at most {MAX_ASSIGNMENT_SIZE}")));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.is_discrete {
            self.interpolation.validate()?;
        }
        self.optimizer.validate()
    }

    pub fn field_config(&self, dim: usize) -> FieldConfig {
        FieldConfig { dim, hidden: self.hidden.clone(), embed_dim: self.embed_dim, time_scale: self.time_scale }
    }

    pub fn model_spec(&self, parts: usize) -> ModelSpec {
        ModelSpec {
            parts,
            coordinates: self.bijection,
            base: self.base,
            is_discrete: self.is_discrete,
            interpolation: self.interpolation,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.optimizer.lr,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps as f64;
                // keep the final steps from having a zero rate
                (0.5 * self.optimizer.lr * (1.0 + (std::f64::consts::PI * frac).cos())).max(self.optimizer.lr * 1e-3)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainData {
    /// Category labels in `0..parts`.
    Categorical { parts: usize, labels: Vec<usize> },
    Compositional(Vec<Composition>),
}

impl TrainData {
    pub fn parts(&self) -> usize {
        match self {
            TrainData::Categorical { parts, .. } => *parts,
            TrainData::Compositional(xs) => xs.first().map_or(0, |x| x.parts()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Categorical { labels, .. } => labels.len(),
            TrainData::Compositional(xs) => xs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("training data is empty".into()));
        }
        let parts = self.parts();
        if parts < 2 {
            return Err(Error::InvalidDimension(format!("K = {parts} < 2")));
        }
        match self {
            TrainData::Categorical { labels, .. } => {
                if let Some(c) = labels.iter().find(|&&c| c >= parts) {
                    return Err(Error::Parameter(format!("label {c} out of range for K = {parts}")));
                }
            }
            TrainData::Compositional(xs) => {
                for x in xs {
                    ensure_len(parts, x.parts())?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub wallclock: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss,wallclock")?;
        for r in &self.records {
            writeln!(w, "{},{},{:.3}", r.step, r.loss, r.wallclock)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)?;
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub field: VelocityField,
    pub log: TrainLog,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Result<ModelCheckpoint> {
        ModelCheckpoint::new(self.spec.clone(), &self.field)
    }
}

/// Fits a velocity field to `data`. Minibatches are drawn with replacement;
/// categorical labels are re-dequantized with fresh noise every time they are
/// drawn. Deterministic for a fixed `cfg.seed`.
pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    data.validate()?;
    let parts = data.parts();
    if matches!(data, TrainData::Categorical { .. }) != cfg.is_discrete {
        return Err(Error::Config("is_discrete does not match the kind of training data".into()));
    }
    let spec = cfg.model_spec(parts);
    let coords = spec.coordinates()?;
    let dim = coords.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut field = VelocityField::new(cfg.field_config(dim), &mut rng)?;
    let shapes: Vec<usize> = field.param_slices_mut().iter().map(|s| s.len()).collect();
    let mut adam = AdamState::new(cfg.optimizer, &shapes)?;

    // Fixed compositional data only needs mapping once.
    let fixed_targets = match data {
        TrainData::Compositional(xs) => {
            let mut m = Array2::zeros((xs.len(), dim));
            for (mut row, x) in m.rows_mut().into_iter().zip(xs) {
                row.assign(&ndarray::ArrayView1::from(&coords.to_flow(x)?));
            }
            Some(m)
        }
        TrainData::Categorical { .. } => None,
    };

    let n = cfg.batch_size;
    let started = Instant::now();
    let mut log = TrainLog::default();
    let mut z1 = Array2::zeros((n, dim));
    for step in 0..cfg.steps {
        match (data, &fixed_targets) {
            (_, Some(targets)) => {
                for mut row in z1.rows_mut() {
                    row.assign(&targets.row(rng.gen_range(0..targets.nrows())));
                }
            }
            (TrainData::Categorical { labels, .. }, None) => {
                for mut row in z1.rows_mut() {
                    let c = labels[rng.gen_range(0..labels.len())];
                    let x = interpolate(c, parts, &cfg.interpolation, &mut rng)?;
                    row.assign(&ndarray::ArrayView1::from(&coords.to_flow(&x)?));
                }
            }
            (TrainData::Compositional(_), None) => unreachable!("targets precomputed"),
        }
        let z0 = cfg.base.sample(&coords, n, &mut rng)?;
        let batch = cfg.coupling.pair(z0.view(), z1.view())?;
        let t: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        if step % 997 == 0 {
            spot_check_path(&batch, &t)?;
        }
        let (loss, grads) = cfm_loss(&field, &batch, &t)?;
        if !loss.is_finite() {
            return Err(Error::Domain(format!("training loss became {loss} at step {step}")));
        }
        let g = grads.slices();
        adam.step_with_lr(&mut field.param_slices_mut(), &g, cfg.lr_at(step))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.records.push(LogRecord { step, loss, wallclock: started.elapsed().as_secs_f64() });
        }
        if step % 1000 == 0 {
            debug!("step {step}: loss {loss:.6}");
        }
    }
    info!("trained {} steps in {:.1}s", cfg.steps, started.elapsed().as_secs_f64());
    Ok(TrainedModel { spec, field, log })
}

/// Recomputes one pair through [`linear_path`] and checks it against the
/// batched arithmetic.
fn spot_check_path(batch: &PairedBatch, t: &[f64]) -> Result<()> {
    let i = 0;
    let z0 = batch.z0.row(i).to_vec();
    let z1 = batch.z1.row(i).to_vec();
    let p = linear_path(&z0, &z1, t[i])?;
    for j in 0..z0.len() {
        let zt = z0[j] * (1.0 - t[i]) + z1[j] * t[i];
        let scale = 1.0 + zt.abs();
        if (p.zt[j] - zt).abs() > 1e-12 * scale || (p.ut[j] - (z1[j] - z0[j])).abs() > 1e-12 * scale {
            return Err(Error::Domain("path sample violates its invariants".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn path_arithmetic() {
        let p = linear_path(&[0.0, 0.0], &[2.0, 0.0], 0.25).unwrap();
        assert_eq!(p.zt, vec![0.5, 0.0]);
        assert_eq!(p.ut, vec![2.0, 0.0]);
        assert_eq!(linear_path(&[1.0], &[3.0], 0.0).unwrap().zt, vec![1.0]);
        assert_eq!(linear_path(&[1.0], &[3.0], 1.0).unwrap().zt, vec![3.0]);
        assert!(linear_path(&[1.0], &[3.0, 1.0], 0.5).is_err());
        assert!(linear_path(&[1.0], &[3.0], 1.5).is_err());
    }

    #[test]
    fn ot_pairs_nearest() {
        let z0 = array![[0.0], [10.0]];
        let z1 = array![[9.0], [1.0]];
        let b = couple_minibatch_ot(z0.view(), z1.view()).unwrap();
        assert_eq!(b.z0, array![[10.0], [0.0]]);
        assert_eq!(b.transport_cost(), 2.0);
        assert_eq!(couple_independent(z0.view(), z1.view()).unwrap().transport_cost(), 162.0);
    }

    #[test]
    fn zero_field_loss_is_mean_squared_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = VelocityField::new(FieldConfig::new(2).with_hidden(vec![8]).with_embed_dim(4), &mut rng).unwrap();
        let batch = PairedBatch { z0: array![[0.0, 1.0], [2.0, -1.0]], z1: array![[1.0, 1.0], [0.0, 0.0]] };
        let (loss, _) = cfm_loss(&field, &batch, &[0.3, 0.8]).unwrap();
        assert!((loss - (1.0 + 5.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn config_json_defaults_and_rejections() {
        let cfg = TrainConfig::from_json(r#"{"bijection": "sb", "coupling": "minibatch_ot", "steps": 5}"#).unwrap();
        assert_eq!(cfg.bijection, CoordinateMap::Sb);
        assert_eq!(cfg.batch_size, 256);
        assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"coupling": "minibatch_ot", "batch_size": 1}"#).is_err());
    }
}
