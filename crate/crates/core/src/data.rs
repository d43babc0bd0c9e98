//! Synthetic datasets and file ingestion.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dequant::{sample_symmetric_dirichlet, CategoricalDistribution};
use crate::error::{Error, Result};
use crate::flow::TrainData;
use crate::geometry::{stick_breaking, stick_breaking_inv, Composition, EuclideanPoint};

/// Half-width `s` of the board `[-s, s]^2`.
pub const CHECKERBOARD_HALF_WIDTH: f64 = 4.0;
/// Cells per side.
pub const CHECKERBOARD_CELLS: usize = 4;

/// Board layout, recorded in experiment manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardLayout {
    pub half_width: f64,
    pub cells: usize,
    /// Cells `(i, j)`, counted from the lower-left corner, are dark when
    /// `i + j` is even.
    pub dark_parity: usize,
}

pub const CHECKERBOARD: CheckerboardLayout =
    CheckerboardLayout { half_width: CHECKERBOARD_HALF_WIDTH, cells: CHECKERBOARD_CELLS, dark_parity: 0 };

fn cell_index(v: f64) -> Option<usize> {
    let s = CHECKERBOARD_HALF_WIDTH;
    if !(-s..s).contains(&v) {
        return None;
    }
    let width = 2.0 * s / CHECKERBOARD_CELLS as f64;
    Some((((v + s) / width).floor() as usize).min(CHECKERBOARD_CELLS - 1))
}

/// Whether a point of the plane lies on a dark cell of the board.
pub fn checkerboard_is_dark(u: f64, v: f64) -> bool {
    match (cell_index(u), cell_index(v)) {
        (Some(i), Some(j)) => (i + j) % 2 == CHECKERBOARD.dark_parity,
        _ => false,
    }
}

/// Uniform points on the dark cells.
pub fn gen_checkerboard_plane<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let dark: Vec<(usize, usize)> = (0..CHECKERBOARD_CELLS)
        .flat_map(|i| (0..CHECKERBOARD_CELLS).map(move |j| (i, j)))
        .filter(|(i, j)| (i + j) % 2 == CHECKERBOARD.dark_parity)
        .collect();
    let width = 2.0 * CHECKERBOARD_HALF_WIDTH / CHECKERBOARD_CELLS as f64;
    (0..n)
        .map(|_| {
            let (i, j) = dark[rng.gen_range(0..dark.len())];
            let u = -CHECKERBOARD_HALF_WIDTH + width * (i as f64 + rng.gen::<f64>());
            let v = -CHECKERBOARD_HALF_WIDTH + width * (j as f64 + rng.gen::<f64>());
            [u, v]
        })
        .collect()
}

/// Checkerboard points pulled onto the 3-part simplex by inverse stick-breaking.
pub fn gen_checkerboard_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<Composition>> {
    gen_checkerboard_plane(n, rng).into_iter().map(|p| stick_breaking_inv(&EuclideanPoint::new(p.to_vec())?)).collect()
}

/// Whether a composition maps onto a dark cell under stick-breaking.
pub fn checkerboard_member(x: &Composition) -> Result<bool> {
    if x.parts() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: x.parts() });
    }
    let (z, _) = stick_breaking(x)?;
    Ok(checkerboard_is_dark(z.values()[0], z.values()[1]))
}

/// Share of samples off the dark cells.
pub fn checkerboard_invalid_fraction(samples: &[Composition]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples".into()));
    }
    let mut invalid = 0usize;
    for x in samples {
        if !checkerboard_member(x)? {
            invalid += 1;
        }
    }
    Ok(invalid as f64 / samples.len() as f64)
}

/// `p_1 = 1/2`, the other half of the mass split by a uniform simplex draw.
pub fn gen_random_categorical<R: Rng + ?Sized>(parts: usize, rng: &mut R) -> Result<CategoricalDistribution> {
    if parts < 2 {
        return Err(Error::InvalidDimension(format!("K = {parts} < 2")));
    }
    let mut p = Vec::with_capacity(parts);
    p.push(0.5);
    if parts == 2 {
        p.push(0.5);
    } else {
        let rest = sample_symmetric_dirichlet(1.0, parts - 1, rng)?;
        p.extend(rest.values().iter().map(|v| 0.5 * v));
    }
    // absorb rounding so the sum check holds exactly
    let tail: f64 = p[1..].iter().sum();
    p[1..].iter_mut().for_each(|v| *v *= 0.5 / tail);
    CategoricalDistribution::new(p)
}

pub fn sample_categories<R: Rng + ?Sized>(p: &CategoricalDistribution, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| p.sample(rng)).collect()
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetHandle {
    CheckerboardSimplex { samples: usize },
    RandomCategorical { parts: usize, samples: usize },
    /// A CSV of compositions, one per row.
    CompositionsFile { path: PathBuf },
    /// One category index per line.
    CategoriesFile { path: PathBuf, parts: usize },
}

/// A loaded dataset and, for synthetic categorical data, the law it came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub data: TrainData,
    pub truth: Option<CategoricalDistribution>,
}

impl DatasetHandle {
    /// Relative file paths are resolved against `base`.
    pub fn load<R: Rng + ?Sized>(&self, base: &Path, rng: &mut R) -> Result<Dataset> {
        match self {
            DatasetHandle::CheckerboardSimplex { samples } => {
                Ok(Dataset { data: TrainData::Compositional(gen_checkerboard_simplex(*samples, rng)?), truth: None })
            }
            DatasetHandle::RandomCategorical { parts, samples } => {
                let p = gen_random_categorical(*parts, rng)?;
                let labels = sample_categories(&p, *samples, rng);
                Ok(Dataset { data: TrainData::Categorical { parts: *parts, labels }, truth: Some(p) })
            }
            DatasetHandle::CompositionsFile { path } => {
                let xs = read_compositions(&base.join(path))?;
                Ok(Dataset { data: TrainData::Compositional(xs), truth: None })
            }
            DatasetHandle::CategoriesFile { path, parts } => {
                let labels = read_categories(&base.join(path), *parts)?;
                Ok(Dataset { data: TrainData::Categorical { parts: *parts, labels }, truth: None })
            }
        }
    }
}

fn data_lines<B: BufRead>(reader: B) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        // a header row is allowed on the first line
        if i == 0 && trimmed.chars().any(|c| c.is_ascii_alphabetic() && c != 'e' && c != 'E') {
            continue;
        }
        out.push((i + 1, trimmed.to_string()));
    }
    Ok(out)
}

fn parse_row(line: usize, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse { line, message: format!("{:?}: {e}", f.trim()) }))
        .collect()
}

/// Reads comma-separated compositions. Every row must have the same number of
/// parts and pass the composition checks.
pub fn read_compositions(path: &Path) -> Result<Vec<Composition>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    parse_compositions(file).map_err(|e| match e {
        Error::Parse { line: 0, .. } => Error::Parse { line: 0, message: format!("{} holds no rows", path.display()) },
        other => other,
    })
}

pub fn parse_compositions<B: BufRead>(reader: B) -> Result<Vec<Composition>> {
    let mut out = Vec::new();
    let mut parts = None;
    for (line, text) in data_lines(reader)? {
        let row = parse_row(line, &text)?;
        if *parts.get_or_insert(row.len()) != row.len() {
            return Err(Error::Parse { line, message: format!("expected {} parts, got {}", parts.unwrap(), row.len()) });
        }
        out.push(Composition::new(row).map_err(|e| Error::Parse { line, message: e.to_string() })?);
    }
    if out.is_empty() {
        return Err(Error::Parse { line: 0, message: "no rows".into() });
    }
    Ok(out)
}

/// Reads 0-based category indices, one per line.
pub fn read_categories(path: &Path, parts: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    for (line, text) in data_lines(file)? {
        let c: usize = text.parse().map_err(|e| Error::Parse { line, message: format!("{text:?}: {e}") })?;
        if c >= parts {
            return Err(Error::Parse { line, message: format!("category {c} out of range for K = {parts}") });
        }
        out.push(c);
    }
    if out.is_empty() {
        return Err(Error::Parse { line: 0, message: format!("{} holds no rows", path.display()) });
    }
    Ok(out)
}
