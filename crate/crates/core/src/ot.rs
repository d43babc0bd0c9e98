//! Exact minibatch optimal transport by linear assignment.

use crate::error::{Error, Result};

pub const MAX_ASSIGNMENT_SIZE: usize = 1024;

/// Minimum-cost perfect matching on a square cost matrix (row-major `n x n`)
/// with the shortest-augmenting-path Hungarian method, `O(n^3)`.
///
/// Returns `assign` with row `i` matched to column `assign[i]`. The search
/// order is fixed, so equal-cost alternatives resolve the same way every run.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::DimensionMismatch { expected: n * n, got: cost.len() });
    }
    if let Some(c) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::Domain(format!("non-finite assignment cost {c}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based potentials u (rows), v (cols); p[j] = row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

pub fn assignment_cost(cost: &[f64], n: usize, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}
