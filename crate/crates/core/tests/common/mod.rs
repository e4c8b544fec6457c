//! Oracles shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use proberlab::SeededRng;
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Central finite-difference gradient of a scalar function.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], coords: &[usize]) -> Vec<f64> {
    let mut x = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Relative error with a 1e-6 floor on the denominator, so that coordinates
/// whose true gradient is zero are judged on absolute agreement.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn sample_coords(rng: &mut SeededRng, len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    (0..k).map(|_| rng.random_range(0..len)).collect()
}

pub fn random_vec(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `log |det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / p;
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    acc
}

/// Numerical Jacobian `J[i][j] = ∂f_i/∂x_j` by central differences.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xx = x.to_vec();
    for j in 0..n {
        xx[j] = x[j] + FD_STEP;
        let up = f(&xx);
        xx[j] = x[j] - FD_STEP;
        let dn = f(&xx);
        xx[j] = x[j];
        cols.push(up.iter().zip(&dn).map(|(u, d)| (u - d) / (2.0 * FD_STEP)).collect::<Vec<f64>>());
    }
    (0..cols[0].len()).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

pub fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Two interleaved half circles with Gaussian noise.
pub fn two_moons(n: usize, noise: f64, rng: &mut SeededRng) -> ndarray::Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, noise).unwrap();
    let mut out = ndarray::Array2::zeros((n, 2));
    for i in 0..n {
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if i % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        out[[i, 0]] = x + normal.sample(rng);
        out[[i, 1]] = y + normal.sample(rng);
    }
    out
}

/// Least-squares fit of `y ≈ [x, 1] β` through the normal equations, solved by
/// Gaussian elimination with partial pivoting.
pub fn least_squares(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = x[0].len() + 1;
    let mut a = vec![vec![0.0; d + 1]; d];
    for (row, &t) in x.iter().zip(y) {
        let z: Vec<f64> = row.iter().copied().chain([1.0]).collect();
        for i in 0..d {
            for j in 0..d {
                a[i][j] += z[i] * z[j];
            }
            a[i][d] += z[i] * t;
        }
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=d {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

pub fn linear_score(beta: &[f64], x: &[f64]) -> f64 {
    x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + beta[x.len()]
}
pub mod checks;
