//! Brute-force reference implementations written from the metric
//! definitions with plain loops, plus random instance builders.
#![allow(dead_code)]

use rand::Rng;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn spatial_disparity(r: &[f64], a: &[Vec<f64>]) -> f64 {
    let n = r.len();
    let mut pos = vec![0.0; n];
    let mut neg = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            pos[i] += a[i][j] * r[j].max(0.0);
            neg[i] += a[i][j] * r[j].min(0.0);
        }
    }
    let (mp, mn) = (mean(&pos), mean(&neg));
    let mut total = 0.0;
    for i in 0..n {
        total += (pos[i] - mp).powi(2) + (neg[i] - mn).powi(2);
    }
    total / n as f64
}

pub fn morans_i(r: &[f64], a: &[Vec<f64>]) -> f64 {
    let n = r.len();
    let m = mean(r);
    let mut w = 0.0;
    let mut num = 0.0;
    for i in 0..n {
        for j in 0..n {
            w += a[i][j];
            num += a[i][j] * (r[i] - m) * (r[j] - m);
        }
    }
    let den: f64 = r.iter().map(|v| (v - m) * (v - m)).sum();
    n as f64 / w * num / den
}

pub fn gei(r: &[f64], alpha: f64) -> f64 {
    let min = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = (-min).max(0.0) + 1e-9;
    let b: Vec<f64> = r.iter().map(|v| v + shift).collect();
    let bm = mean(&b);
    if bm < 1e-9 {
        return 0.0;
    }
    let s: f64 = b.iter().map(|v| (v / bm).powf(alpha) - 1.0).sum();
    s / (r.len() as f64 * alpha * (alpha - 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx).powi(2);
        syy += (y[i] - my).powi(2);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

pub fn demographic_disparity(r: &[f64], minor: &[f64], major: &[f64]) -> f64 {
    pearson(r, minor).abs() + pearson(r, major).abs()
}

pub fn sdi(r: &[f64], minor: &[f64], major: &[f64]) -> f64 {
    let cm = pearson(r, minor);
    let cj = pearson(r, major);
    let denom = cm.abs() + cj.abs();
    if denom < 1e-12 {
        return 0.0;
    }
    (cm - cj).abs() / denom * (cm * cj).abs().sqrt()
}

pub fn mae(y_hat: &[f64], y: &[f64]) -> f64 {
    let s: f64 = y_hat.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    s / y.len() as f64
}

pub fn smape(y_hat: &[f64], y: &[f64], eps: f64) -> f64 {
    let s: f64 = y_hat
        .iter()
        .zip(y)
        .map(|(a, b)| (2.0 * (a - b).abs() + eps) / (a.abs() + b.abs() + eps))
        .sum();
    s / y.len() as f64
}

/// Relative closeness with a tiny absolute floor for values at zero.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-15
}

pub struct Instance {
    pub r: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub minor: Vec<f64>,
    pub major: Vec<f64>,
}

/// Symmetric sparse nonnegative adjacency with at least one edge.
pub fn random_instance<R: Rng>(rng: &mut R, max_n: usize) -> Instance {
    let n = rng.gen_range(3..=max_n);
    let mut a = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(0.3) {
                let w = rng.gen_range(0.05..1.0);
                a[i][j] = w;
                a[j][i] = w;
            }
        }
    }
    a[0][1] = f64::max(a[0][1], 0.5);
    a[1][0] = a[0][1];
    let scale = rng.gen_range(0.1..20.0);
    let r = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    let minor: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let major = minor.iter().map(|m| (1.0 - m) * rng.gen_range(0.8..1.0)).collect();
    Instance { r, a, minor, major }
}

pub fn rook_grid(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let n = rows * cols;
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..rows {
        for j in 0..cols {
            let k = i * cols + j;
            if i + 1 < rows {
                a[k][k + cols] = 1.0;
                a[k + cols][k] = 1.0;
            }
            if j + 1 < cols {
                a[k][k + 1] = 1.0;
                a[k + 1][k] = 1.0;
            }
        }
    }
    a
}

pub fn to_array(a: &[Vec<f64>]) -> ndarray::Array2<f64> {
    let n = a.len();
    ndarray::Array2::from_shape_fn((n, n), |(i, j)| a[i][j])
}

pub fn region_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("R{i:02}")).collect()
}
