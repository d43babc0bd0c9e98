//! Independent oracles shared by the integration tests: finite differences,
//! determinants, simplex quadrature, brute-force assignment.
#![allow(dead_code)]

/// Central-difference Jacobian of `f: R^n -> R^m`, row-major `m x n`, with
/// step `1e-6 * max(1, |x_i|)`.
pub fn jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let m = f(x).len();
    let mut jac = vec![vec![0.0; n]; m];
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..m {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// `log |det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().partial_cmp(&m[j][c].abs()).unwrap()).unwrap();
        m.swap(c, p);
        let pivot = m[c][c];
        if pivot == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += pivot.abs().ln();
        for r in c + 1..n {
            let factor = m[r][c] / pivot;
            for k in c..n {
                m[r][k] -= factor * m[c][k];
            }
        }
    }
    acc
}

pub fn transpose_mul(j: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = j[0].len();
    let mut g = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            g[a][b] = j.iter().map(|row| row[a] * row[b]).sum();
        }
    }
    g
}

/// Relative error with a floor so near-zero pairs do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Midpoint rule over the 1-simplex `{(x, 1-x)}`, `n` cells.
pub fn quad_simplex2<F: Fn(&[f64]) -> f64>(f: F, n: usize) -> f64 {
    let h = 1.0 / n as f64;
    (0..n)
        .map(|i| {
            let x = (i as f64 + 0.5) * h;
            f(&[x, 1.0 - x]) * h
        })
        .sum()
}

/// Quadrature over the 2-simplex (measure `dx1 dx2`) on a uniform barycentric
/// grid of `n^2` triangles, evaluated at centroids.
pub fn quad_simplex3<F: Fn(&[f64]) -> f64>(f: F, n: usize) -> f64 {
    let h = 1.0 / n as f64;
    let area = 0.5 * h * h;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n - i {
            // upward triangle (i, j), (i+1, j), (i, j+1)
            let (a, b) = ((i as f64 + 1.0 / 3.0) * h, (j as f64 + 1.0 / 3.0) * h);
            acc += f(&[a, b, 1.0 - a - b]) * area;
            if i + j + 1 < n {
                // downward triangle (i+1, j), (i, j+1), (i+1, j+1)
                let (a, b) = ((i as f64 + 2.0 / 3.0) * h, (j as f64 + 2.0 / 3.0) * h);
                acc += f(&[a, b, 1.0 - a - b]) * area;
            }
        }
    }
    acc
}

/// Minimum of `sum_i cost[i][perm[i]]` over all permutations.
pub fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
    fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

/// `psi'(a) = sum_n 1 / (a + n)^2`, with an integral tail after `terms`.
pub fn trigamma_series(a: f64, terms: usize) -> f64 {
    let head: f64 = (0..terms).map(|n| 1.0 / (a + n as f64).powi(2)).sum();
    let m = a + terms as f64;
    // Euler-Maclaurin tail: 1/m + 1/(2 m^2) + 1/(6 m^3)
    head + 1.0 / m + 0.5 / (m * m) + 1.0 / (6.0 * m * m * m)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
