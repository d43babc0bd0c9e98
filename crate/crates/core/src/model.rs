//! What a trained flow needs besides its weights: the coordinate map between
//! the simplex and the flow space, the base distribution, and the
//! interpolation that produced the training targets.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dequant::{mean_aitchison_norm, sample_symmetric_dirichlet, InterpolationConfig};
use crate::error::{domain, ensure_len, Error, Result};
use crate::geometry::{Bijection, BijectionKind, Composition};
use crate::nn::{FieldCheckpoint, VelocityField};
use crate::special::ln_gamma;

/// Coordinates the flow runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateMap {
    Ilr,
    Sb,
    Alr,
    Mlr,
    /// The first `D` simplex coordinates themselves (the LinearFM baseline).
    Linear,
}

impl CoordinateMap {
    pub fn name(self) -> &'static str {
        match self {
            CoordinateMap::Ilr => "ilr",
            CoordinateMap::Sb => "sb",
            CoordinateMap::Alr => "alr",
            CoordinateMap::Mlr => "mlr",
            CoordinateMap::Linear => "linear",
        }
    }

    fn bijection_kind(self) -> Option<BijectionKind> {
        match self {
            CoordinateMap::Ilr => Some(BijectionKind::Ilr),
            CoordinateMap::Sb => Some(BijectionKind::Sb),
            CoordinateMap::Alr => Some(BijectionKind::Alr),
            CoordinateMap::Mlr => Some(BijectionKind::Mlr),
            CoordinateMap::Linear => None,
        }
    }
}

impl fmt::Display for CoordinateMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoordinateMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "linearfm" | "identity" => Ok(Self::Linear),
            other => match other.parse::<BijectionKind>()? {
                BijectionKind::Ilr => Ok(Self::Ilr),
                BijectionKind::Sb => Ok(Self::Sb),
                BijectionKind::Alr => Ok(Self::Alr),
                BijectionKind::Mlr => Ok(Self::Mlr),
                BijectionKind::Sphere => Err(Error::Config("sphere coordinates cannot back a flow".into())),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistribution {
    StandardNormal,
    /// `x_0 ~ Dir(1, .., 1)` pushed through the coordinate map.
    UniformSimplex,
}

/// Everything about a model except its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub parts: usize,
    pub coordinates: CoordinateMap,
    pub base: BaseDistribution,
    pub is_discrete: bool,
    pub interpolation: InterpolationConfig,
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        self.parts - 1
    }

    pub fn coordinates(&self) -> Result<Coordinates> {
        Coordinates::new(self.coordinates, self.parts, self.is_discrete && self.interpolation.scaling, self.interpolation.lambda)
    }
}

/// Runtime form of a [`CoordinateMap`]: `z = phi(x) / scale`.
#[derive(Debug, Clone)]
pub struct Coordinates {
    map: CoordinateMap,
    parts: usize,
    bijection: Option<Bijection>,
    scale: f64,
}

impl Coordinates {
    /// With `scaling`, targets are divided by the Aitchison norm of the
    /// component means for `lambda`.
    pub fn new(map: CoordinateMap, parts: usize, scaling: bool, lambda: f64) -> Result<Self> {
        let bijection = map.bijection_kind().map(|k| Bijection::new(k, parts)).transpose()?;
        if parts < 2 {
            return Err(Error::InvalidDimension(format!("K = {parts} < 2")));
        }
        let scale = if scaling { mean_aitchison_norm(lambda, parts)? } else { 1.0 };
        Ok(Self { map, parts, bijection, scale })
    }

    pub fn unscaled(map: CoordinateMap, parts: usize) -> Result<Self> {
        Self::new(map, parts, false, 0.5)
    }

    pub fn map(&self) -> CoordinateMap {
        self.map
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn dim(&self) -> usize {
        self.parts - 1
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn to_flow(&self, x: &Composition) -> Result<Vec<f64>> {
        ensure_len(self.parts, x.parts())?;
        let mut z = match &self.bijection {
            Some(b) => b.forward(x)?.0.into_inner(),
            None => x.values()[..self.dim()].to_vec(),
        };
        if self.scale != 1.0 {
            z.iter_mut().for_each(|v| *v /= self.scale);
        }
        Ok(z)
    }

    /// `log |det dz / dx_{1:D}|` including the scaling.
    pub fn log_abs_det(&self, x: &Composition) -> f64 {
        let jac = self.bijection.as_ref().map_or(0.0, |b| b.log_abs_det(x));
        jac - self.dim() as f64 * self.scale.ln()
    }

    /// The simplex point for flow coordinates `z`, without projection. For
    /// linear coordinates this may leave the simplex.
    pub fn to_simplex_unprojected(&self, z: &[f64]) -> Vec<f64> {
        let unscaled: Vec<f64> = z.iter().map(|v| v * self.scale).collect();
        match &self.bijection {
            Some(b) => b.inverse_raw(&unscaled),
            None => {
                let mut x = unscaled;
                let last = 1.0 - x.iter().sum::<f64>();
                x.push(last);
                x
            }
        }
    }

    /// The simplex point for `z`. Linear coordinates are projected back by
    /// clipping every part to at least [`LINEAR_CLIP_FLOOR`] and renormalizing.
    pub fn to_simplex(&self, z: &[f64]) -> Vec<f64> {
        let x = self.to_simplex_unprojected(z);
        match self.map {
            CoordinateMap::Linear => project_to_simplex(&x),
            _ => x,
        }
    }
}

/// Floor used when clipping LinearFM outputs back into the open simplex.
pub const LINEAR_CLIP_FLOOR: f64 = 1e-12;

pub fn project_to_simplex(x: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = x.iter().map(|v| if v.is_nan() { LINEAR_CLIP_FLOOR } else { v.max(LINEAR_CLIP_FLOOR) }).collect();
    let sum: f64 = clipped.iter().sum();
    clipped.iter().map(|v| v / sum).collect()
}

impl BaseDistribution {
    /// `n` draws in flow coordinates, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, coords: &Coordinates, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let d = coords.dim();
        match self {
            BaseDistribution::StandardNormal => {
                Ok(Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng)))
            }
            BaseDistribution::UniformSimplex => {
                let mut out = Array2::zeros((n, d));
                for mut row in out.rows_mut() {
                    let x = sample_symmetric_dirichlet(1.0, coords.parts(), rng)?;
                    row.assign(&ndarray::ArrayView1::from(&coords.to_flow(&x)?));
                }
                Ok(out)
            }
        }
    }

    /// `log p_0(z)` in flow coordinates.
    pub fn log_density(&self, coords: &Coordinates, z: &[f64]) -> f64 {
        match self {
            BaseDistribution::StandardNormal => {
                let d = z.len() as f64;
                -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
            }
            BaseDistribution::UniformSimplex => {
                // Dir(1) has density (K - 1)! on the simplex; pull it back.
                let x = coords.to_simplex_unprojected(z);
                match Composition::new(x) {
                    Ok(x) => ln_gamma(coords.parts() as f64) - coords.log_abs_det(&x),
                    Err(_) => f64::NEG_INFINITY,
                }
            }
        }
    }
}

/// On-disk model: spec plus field weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model: ModelSpec,
    pub field: FieldCheckpoint,
}

impl ModelCheckpoint {
    pub fn new(model: ModelSpec, field: &VelocityField) -> Result<Self> {
        ensure_len(model.dim(), field.dim())?;
        Ok(Self { model, field: field.to_checkpoint() })
    }

    pub fn field(&self) -> Result<VelocityField> {
        let f = VelocityField::from_checkpoint(&self.field)?;
        if f.dim() != self.model.dim() {
            return Err(domain("checkpoint field dimension does not match the model"));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Self = serde_json::from_reader(file)?;
        ck.field()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_projection_clips_and_renormalizes() {
        let c = Coordinates::unscaled(CoordinateMap::Linear, 3).unwrap();
        let raw = c.to_simplex_unprojected(&[1.2, 0.3]);
        assert!(raw[2] < 0.0);
        let x = c.to_simplex(&[1.2, 0.3]);
        assert!(Composition::new(x).is_ok());
    }

    #[test]
    fn scaled_coordinates_divide_by_mean_norm() {
        let plain = Coordinates::unscaled(CoordinateMap::Ilr, 4).unwrap();
        let scaled = Coordinates::new(CoordinateMap::Ilr, 4, true, 0.5).unwrap();
        let x = Composition::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let a = plain.to_flow(&x).unwrap();
        let b = scaled.to_flow(&x).unwrap();
        let s = mean_aitchison_norm(0.5, 4).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u / s - v).abs() < 1e-14);
        }
        let back = scaled.to_simplex(&b);
        for (u, v) in back.iter().zip(x.values()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!((scaled.log_abs_det(&x) - plain.log_abs_det(&x) + 3.0 * s.ln()).abs() < 1e-12);
    }

    #[test]
    fn parse_coordinates() {
        assert_eq!("ILR".parse::<CoordinateMap>().unwrap(), CoordinateMap::Ilr);
        assert_eq!("linear".parse::<CoordinateMap>().unwrap(), CoordinateMap::Linear);
        assert!("sphere".parse::<CoordinateMap>().is_err());
    }
}
