//! Feedforward velocity field `v(z, t)` with a sinusoidal time embedding and
//! hand-written reverse-mode gradients.
//!
//! Batches are row-major `n x D` matrices. The network input is
//! `[z, embed(t)]`, hidden layers use the tanh approximation of GELU, and the
//! output layer is linear.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_TIME_SCALE: f64 = 1000.0;
pub const CHECKPOINT_FORMAT: &str = "simplex-flow/velocity-field";
pub const CHECKPOINT_VERSION: u32 = 1;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluTanh,
}

// Through exp, which is cheaper than the libm tanh; saturates correctly at
// both ends.
#[inline]
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::GeluTanh => 0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x))),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::GeluTanh => {
                let th = tanh(GELU_C * (x + GELU_A * x * x * x));
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

/// `[sin(t w_j) .., cos(t w_j) ..]` with `w_j = scale * 10000^{-2j / dim}`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    time_embedding_scaled(t, dim, DEFAULT_TIME_SCALE)
}

pub fn time_embedding_scaled(t: f64, dim: usize, scale: f64) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dimension must be even and positive, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    fill_embedding(t, scale, &mut out);
    Ok(out)
}

fn frequencies(dim: usize, scale: f64) -> Vec<f64> {
    (0..dim / 2).map(|j| scale * 10_000f64.powf(-2.0 * j as f64 / dim as f64)).collect()
}

fn fill_embedding_with(t: f64, freqs: &[f64], out: &mut [f64]) {
    let half = freqs.len();
    for (j, w) in freqs.iter().enumerate() {
        let (s, c) = (t * w).sin_cos();
        out[j] = s;
        out[half + j] = c;
    }
}

fn fill_embedding(t: f64, scale: f64, out: &mut [f64]) {
    fill_embedding_with(t, &frequencies(out.len(), scale), out);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub time_scale: f64,
}

impl FieldConfig {
    pub fn new(dim: usize) -> Self {
        Self { dim, hidden: vec![512; 4], embed_dim: DEFAULT_EMBED_DIM, time_scale: DEFAULT_TIME_SCALE }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_embed_dim(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("field dimension must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embed_dim must be even and positive, got {}", self.embed_dim)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// An affine layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    fn he_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..limit));
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    preacts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Parameter gradients, one `(weight, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().expect("standard layout"), l.bias.as_slice().expect("contiguous")])
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct VelocityField {
    config: FieldConfig,
    activation: Activation,
    layers: Vec<Dense>,
    version: u64,
}

impl VelocityField {
    /// He-uniform hidden layers and a zero output layer, so the untrained
    /// field is identically zero.
    pub fn new<R: Rng + ?Sized>(config: FieldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.dim + config.embed_dim];
        widths.extend(&config.hidden);
        let mut layers: Vec<Dense> = widths.windows(2).map(|w| Dense::he_uniform(w[0], w[1], rng)).collect();
        layers.push(Dense::zeros(*widths.last().unwrap(), config.dim));
        Ok(Self { config, activation: Activation::GeluTanh, layers, version: 0 })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [l.weight.as_slice_mut().expect("standard layout"), l.bias.as_slice_mut().expect("contiguous")]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn input_matrix(&self, z: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        ensure_len(self.config.dim, z.ncols())?;
        ensure_len(z.nrows(), t.len())?;
        let d = self.config.dim;
        let mut x = Array2::zeros((z.nrows(), d + self.config.embed_dim));
        x.slice_mut(s![.., ..d]).assign(&z);
        let freqs = frequencies(self.config.embed_dim, self.config.time_scale);
        let mut prev: Option<(f64, usize)> = None;
        for (i, &ti) in t.iter().enumerate() {
            match prev {
                // ODE batches share one time; copy instead of recomputing
                Some((tp, ip)) if tp == ti => {
                    let (done, rest) = x.view_mut().split_at(Axis(0), i);
                    let mut row = rest.index_axis_move(Axis(0), 0);
                    row.slice_mut(s![d..]).assign(&done.row(ip).slice(s![d..]));
                }
                _ => {
                    let mut row = x.row_mut(i);
                    fill_embedding_with(ti, &freqs, &mut row.as_slice_mut().expect("contiguous row")[d..]);
                    prev = Some((ti, i));
                }
            }
        }
        Ok(x)
    }

    /// Velocities for a batch of states `z` (`n x D`) at times `t`.
    pub fn forward(&self, z: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let mut h = self.input_matrix(z, t)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                let act = self.activation;
                h.mapv_inplace(|v| act.apply(v));
            }
        }
        Ok(h)
    }

    /// Velocity at a single state.
    pub fn eval(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let zm = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
        Ok(self.forward(zm, &[t])?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, z: ArrayView2<f64>, t: &[f64]) -> Result<(Array2<f64>, ForwardCache)> {
        let mut h = self.input_matrix(z, t)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(last);
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = h.dot(&layer.weight) + &layer.bias;
            inputs.push(h);
            if i < last {
                let act = self.activation;
                h = pre.mapv(|v| act.apply(v));
                preacts.push(pre);
            } else {
                h = pre;
            }
        }
        Ok((h, ForwardCache { version: self.version, inputs, preacts }))
    }

    fn check_cache(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        ensure_len(cache.batch_size(), upstream.nrows())?;
        ensure_len(self.config.dim, upstream.ncols())
    }

    /// Reverse pass: parameter gradients and `d/dz` of `sum(upstream * v)`.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        self.check_cache(cache, upstream)?;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let weight = input.t().dot(&g).as_standard_layout().into_owned();
            grads.push(Dense { weight, bias: g.sum_axis(Axis(0)) });
            let mut g_in = g.dot(&layer.weight.t());
            if i > 0 {
                let act = self.activation;
                g_in.zip_mut_with(&cache.preacts[i - 1], |gv, &p| *gv *= act.derivative(p));
            }
            g = g_in;
        }
        grads.reverse();
        let input_grad = g.slice(s![.., ..self.config.dim]).to_owned();
        Ok((Gradients { layers: grads }, input_grad))
    }

    /// Only the input gradient `J^T upstream` per row; skips parameter gradients.
    pub fn input_vjp(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_cache(cache, upstream)?;
        let mut g = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let w = if i == 0 { layer.weight.slice(s![..self.config.dim, ..]) } else { layer.weight.view() };
            let mut g_in = g.dot(&w.t());
            if i > 0 {
                let act = self.activation;
                g_in.zip_mut_with(&cache.preacts[i - 1], |gv, &p| *gv *= act.derivative(p));
            }
            g = g_in;
        }
        Ok(g)
    }

    pub fn to_checkpoint(&self) -> FieldCheckpoint {
        FieldCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dim: self.config.dim,
            hidden: self.config.hidden.clone(),
            embed_dim: self.config.embed_dim,
            time_scale: self.config.time_scale,
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.fan_in(),
                    cols: l.fan_out(),
                    weights: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &FieldCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let config = FieldConfig {
            dim: ck.dim,
            hidden: ck.hidden.clone(),
            embed_dim: ck.embed_dim,
            time_scale: ck.time_scale,
        };
        config.validate()?;
        let mut widths = vec![config.dim + config.embed_dim];
        widths.extend(&config.hidden);
        widths.push(config.dim);
        ensure_len(widths.len() - 1, ck.layers.len())?;
        let layers = ck
            .layers
            .iter()
            .zip(widths.windows(2))
            .map(|(rec, w)| {
                if rec.rows != w[0] || rec.cols != w[1] {
                    return Err(Error::Config(format!(
                        "layer shape {}x{} does not match architecture {}x{}",
                        rec.rows, rec.cols, w[0], w[1]
                    )));
                }
                ensure_len(rec.rows * rec.cols, rec.weights.len())?;
                ensure_len(rec.cols, rec.bias.len())?;
                Ok(Dense {
                    weight: Array2::from_shape_vec((rec.rows, rec.cols), rec.weights.clone()).expect("checked"),
                    bias: Array1::from(rec.bias.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, activation: ck.activation, layers, version: 0 })
    }
}

/// One layer in a checkpoint: `rows x cols` weights in row-major order
/// (`rows` = fan-in), then `cols` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCheckpoint {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub time_scale: f64,
    pub activation: Activation,
    pub layers: Vec<LayerRecord>,
}
