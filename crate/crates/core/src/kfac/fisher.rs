use super::KfacError;
use crate::linalg::Matrix;
use crate::nn::ops::softmax_in_place;

const MAX_INPUTS: usize = 8;
const MAX_CLASSES: usize = 4;
const MAX_EXAMPLES: usize = 64;

/// Exact and Kronecker-factored Fisher of a linear softmax model.
#[derive(Debug, Clone)]
pub struct FisherCheck {
    /// `(C·D) × (C·D)`, indexed by the row-major flattening of `W`.
    pub exact: Matrix,
    pub a: Matrix,
    pub g: Matrix,
    /// `‖F_exact − G⊗A‖_F / ‖F_exact‖_F`.
    pub relative_error: f64,
}

/// Compares `G ⊗ A` with the Fisher of `logits = W x` over the rows of `x`.
///
/// The expectation over labels is taken exactly by weighting every class by
/// the model probability, so the result carries no sampling noise.
pub fn kfac_vs_exact_fisher_check(w: &Matrix, x: &Matrix) -> Result<FisherCheck, KfacError> {
    let (c, d) = w.shape();
    let n = x.rows();
    if d > MAX_INPUTS || c > MAX_CLASSES || n > MAX_EXAMPLES {
        return Err(KfacError::TooLarge(format!(
            "{c} classes × {d} inputs × {n} examples (limits {MAX_CLASSES}, {MAX_INPUTS}, {MAX_EXAMPLES})"
        )));
    }
    if x.cols() != d {
        return Err(KfacError::Shape(format!("inputs have {} columns, weights {d}", x.cols())));
    }
    if n == 0 || c == 0 || d == 0 {
        return Err(KfacError::Empty("fisher check dataset".into()));
    }
    let logits = x.matmul_t(w)?;
    let mut exact = Matrix::zeros(c * d, c * d);
    let mut g_fac = Matrix::zeros(c, c);
    let mut a_fac = Matrix::zeros(d, d);
    let mut p = vec![0.0; c];
    let mut flat = vec![0.0; c * d];
    for r in 0..n {
        p.copy_from_slice(logits.row(r));
        softmax_in_place(&mut p);
        let xr = x.row(r);
        for (i, &xi) in xr.iter().enumerate() {
            for (j, &xj) in xr.iter().enumerate() {
                a_fac.as_mut_slice()[i * d + j] += xi * xj;
            }
        }
        for y in 0..c {
            let gy: Vec<f64> = (0..c).map(|k| p[k] - f64::from(u8::from(k == y))).collect();
            for k in 0..c {
                for l in 0..c {
                    g_fac.as_mut_slice()[k * c + l] += p[y] * gy[k] * gy[l];
                }
                for (i, &xi) in xr.iter().enumerate() {
                    flat[k * d + i] = gy[k] * xi;
                }
            }
            let e = exact.as_mut_slice();
            for u in 0..c * d {
                for v in 0..c * d {
                    e[u * c * d + v] += p[y] * flat[u] * flat[v];
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    exact.scale_in_place(inv);
    g_fac.scale_in_place(inv);
    a_fac.scale_in_place(inv);
    let approx = g_fac.kron(&a_fac);
    let denom = exact.frobenius_norm();
    let relative_error = if denom == 0.0 { approx.frobenius_norm() } else { exact.sub(&approx)?.frobenius_norm() / denom };
    Ok(FisherCheck { exact, a: a_fac, g: g_fac, relative_error })
}
