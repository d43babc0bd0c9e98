//! Fixed-step Euler and adaptive Dormand-Prince 5(4) integrators.
//!
//! The state is a flat vector holding one or more trajectories of equal
//! length `block`. Dopri5 measures the error of each trajectory as an RMS over
//! its entries and accepts a step when the worst trajectory passes.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::nn::VelocityField;

pub const DEFAULT_EULER_STEPS: usize = 300;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_STEPS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SolverConfig {
    Euler {
        #[serde(default = "default_euler_steps")]
        steps: usize,
    },
    Dopri5 {
        #[serde(default = "default_tol")]
        atol: f64,
        #[serde(default = "default_tol")]
        rtol: f64,
        #[serde(default = "default_max_steps")]
        max_steps: usize,
    },
}

fn default_euler_steps() -> usize {
    DEFAULT_EULER_STEPS
}

fn default_tol() -> f64 {
    DEFAULT_TOLERANCE
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::Euler { steps: DEFAULT_EULER_STEPS }
    }
}

impl SolverConfig {
    pub fn euler(steps: usize) -> Self {
        SolverConfig::Euler { steps }
    }

    pub fn dopri5(atol: f64, rtol: f64) -> Self {
        SolverConfig::Dopri5 { atol, rtol, max_steps: DEFAULT_MAX_STEPS }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SolverConfig::Euler { steps: 0 } => Err(Error::Config("euler needs at least one step".into())),
            SolverConfig::Dopri5 { atol, rtol, max_steps } if !(atol > 0.0 && rtol > 0.0) || max_steps == 0 => {
                Err(Error::Config(format!("invalid dopri5 settings atol={atol} rtol={rtol} max_steps={max_steps}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `t: 0 -> 1`, base to data.
    Forward,
    /// `t: 1 -> 0`, data to base.
    Reverse,
}

impl Direction {
    pub fn span(self) -> (f64, f64) {
        match self {
            Direction::Forward => (0.0, 1.0),
            Direction::Reverse => (1.0, 0.0),
        }
    }
}

/// Result of an integration and how much work it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub state: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1` (either order).
pub fn solve<F>(mut f: F, y0: &[f64], t0: f64, t1: f64, block: usize, solver: &SolverConfig) -> Result<Solution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    solver.validate()?;
    if block == 0 || y0.len() % block != 0 {
        return Err(Error::Config(format!("state length {} is not a multiple of block {block}", y0.len())));
    }
    match *solver {
        SolverConfig::Euler { steps } => euler(&mut f, y0, t0, t1, steps),
        SolverConfig::Dopri5 { atol, rtol, max_steps } => dopri5(&mut f, y0, t0, t1, block, atol, rtol, max_steps),
    }
}

fn euler<F>(f: &mut F, y0: &[f64], t0: f64, t1: f64, steps: usize) -> Result<Solution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let mut dy = vec![0.0; y.len()];
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        f(t, &y, &mut dy)?;
        y.iter_mut().zip(&dy).for_each(|(a, d)| *a += h * d);
    }
    Ok(Solution { state: y, accepted: steps, rejected: 0, evaluations: steps })
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Step-size controller.
const SAFE: f64 = 0.9;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

fn error_norm(err: &[f64], y: &[f64], y_new: &[f64], block: usize, atol: f64, rtol: f64) -> f64 {
    let mut worst = 0.0f64;
    for start in (0..err.len()).step_by(block) {
        let mut acc = 0.0;
        for i in start..start + block {
            let sk = atol + rtol * y[i].abs().max(y_new[i].abs());
            acc += (err[i] / sk).powi(2);
        }
        worst = worst.max((acc / block as f64).sqrt());
    }
    worst
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    f: &mut F,
    t0: f64,
    y0: &[f64],
    k1: &[f64],
    dir: f64,
    block: usize,
    atol: f64,
    rtol: f64,
    span: f64,
) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let zeros = vec![0.0; y0.len()];
    let d0 = error_norm(y0, y0, &zeros, block, atol, rtol);
    let d1 = error_norm(k1, y0, &zeros, block, atol, rtol);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(span);
    let y1: Vec<f64> = y0.iter().zip(k1).map(|(y, k)| y + dir * h * k).collect();
    let mut k2 = vec![0.0; y0.len()];
    f(t0 + dir * h, &y1, &mut k2)?;
    let diff: Vec<f64> = k2.iter().zip(k1).map(|(a, b)| a - b).collect();
    let d2 = error_norm(&diff, y0, &zeros, block, atol, rtol) / h;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / dmax).powf(0.2) };
    Ok((100.0 * h).min(h1).min(span))
}

#[allow(clippy::too_many_arguments)]
fn dopri5<F>(
    f: &mut F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    block: usize,
    atol: f64,
    rtol: f64,
    max_steps: usize,
) -> Result<Solution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y0.len();
    let span = (t1 - t0).abs();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut y = y0.to_vec();
    if span == 0.0 {
        return Ok(Solution { state: y, accepted: 0, rejected: 0, evaluations: 0 });
    }
    let mut k1 = vec![0.0; n];
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    f(t0, &y, &mut k1)?;
    let mut evaluations = 1;
    let mut h = initial_step(f, t0, &y, &k1, dir, block, atol, rtol, span)?;
    evaluations += 1;
    let mut t = t0;
    let mut facold = 1e-4f64;
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut last = false;
    loop {
        if accepted + rejected >= max_steps {
            return Err(Error::Integration { t, steps: accepted + rejected, state: y });
        }
        let remaining = (t1 - t).abs();
        if h >= remaining * (1.0 - 1e-12) {
            h = remaining;
            last = true;
        }
        let hs = dir * h;
        for i in 0..n {
            tmp[i] = y[i] + hs * A21 * k1[i];
        }
        f(t + C2 * hs, &tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * hs, &tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * hs, &tmp, &mut k4)?;
        for i in 0..n {
            tmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * hs, &tmp, &mut k5)?;
        for i in 0..n {
            tmp[i] = y[i] + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + hs, &tmp, &mut k6)?;
        for i in 0..n {
            y_new[i] = y[i] + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        let t_new = if last { t1 } else { t + hs };
        f(t_new, &y_new, &mut k7)?;
        evaluations += 6;
        for i in 0..n {
            err[i] = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let e = error_norm(&err, &y, &y_new, block, atol, rtol);
        if !e.is_finite() {
            return Err(Error::Integration { t, steps: accepted + rejected, state: y });
        }
        let fac11 = e.powf(EXPO1);
        if e <= 1.0 {
            accepted += 1;
            let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            facold = e.max(1e-4);
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            t = t_new;
            if last {
                break;
            }
            h /= fac;
        } else {
            rejected += 1;
            last = false;
            h /= (fac11 / SAFE).min(1.0 / FAC_MIN);
        }
        if h < 1e-14 * span.max(t.abs()) {
            return Err(Error::Integration { t, steps: accepted + rejected, state: y });
        }
    }
    Ok(Solution { state: y, accepted, rejected, evaluations })
}

/// Transports a batch of states (`n x D`) through the velocity field.
pub fn integrate(
    field: &VelocityField,
    z0: ArrayView2<f64>,
    direction: Direction,
    solver: &SolverConfig,
) -> Result<Array2<f64>> {
    let (n, d) = z0.dim();
    ensure_len(field.dim(), d)?;
    let y0: Vec<f64> = z0.iter().copied().collect();
    let (t0, t1) = direction.span();
    let mut tvec = vec![0.0; n];
    let sol = solve(
        |t, y, dy| {
            tvec.iter_mut().for_each(|v| *v = t);
            let z = ArrayView2::from_shape((n, d), y).expect("state shape");
            let v = field.forward(z, &tvec)?;
            dy.copy_from_slice(v.as_slice().expect("standard layout"));
            Ok(())
        },
        &y0,
        t0,
        t1,
        d,
        solver,
    )?;
    Ok(Array2::from_shape_vec((n, d), sol.state).expect("state shape"))
}
