//! Row-wise building blocks shared by both architectures.

use rand::Rng;

use crate::linalg::Matrix;

pub const RMS_EPS: f64 = 1e-5;

/// RMS-normalizes each row and applies the gain. Returns the output and the
/// per-row reciprocal RMS needed for the backward pass.
pub fn rmsnorm(x: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let g = gain.as_slice();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let ir = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(ir);
        for ((o, &v), &gv) in out.row_mut(r).iter_mut().zip(row).zip(g) {
            *o = v * ir * gv;
        }
    }
    (out, inv)
}

/// Backward of [`rmsnorm`]: returns `dx` and accumulates into `dgain`.
pub fn rmsnorm_backward(x: &Matrix, inv: &[f64], gain: &Matrix, dy: &Matrix, dgain: &mut Matrix) -> Matrix {
    let d = x.cols();
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let ir = inv[r];
        let xr = x.row(r);
        let dyr = dy.row(r);
        // xhat = x * ir, dxhat = dy * g
        let mut dot = 0.0;
        for c in 0..d {
            let xhat = xr[c] * ir;
            let dxhat = dyr[c] * g[c];
            dgain.as_mut_slice()[c] += dyr[c] * xhat;
            dot += dxhat * xhat;
        }
        let mean = dot / d as f64;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            let xhat = xr[c] * ir;
            *o = (dyr[c] * g[c] - xhat * mean) * ir;
        }
    }
    dx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        softmax_in_place(p.row_mut(r));
    }
    p
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, descending, lower index first on ties.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Draws an index from the categorical distribution `probs`.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass past the end: use the last non-zero class
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Summed cross-entropy over rows with a target, plus `softmax − onehot` for
/// those rows (zero rows elsewhere).
pub fn cross_entropy(logits: &Matrix, targets: &[Option<usize>]) -> (f64, Matrix, usize) {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut count = 0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let lsm = log_softmax_row(logits.row(r));
        loss -= lsm[t];
        count += 1;
        for (g, l) in grad.row_mut(r).iter_mut().zip(&lsm) {
            *g = l.exp();
        }
        grad.row_mut(r)[t] -= 1.0;
    }
    (loss, grad, count)
}
