use serde::{Deserialize, Serialize};

use super::{canonical_sign, LinalgError, Matrix};

const MAX_SWEEPS: usize = 100;

/// Largest absolute asymmetry accepted before symmetrizing.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Negative eigenvalues down to `-PSD_CLAMP_TOL * max(1, λ_max)` are treated
/// as rounding noise in a second-moment matrix and clamped to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U diag(λ) Uᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let u = &self.eigenvectors;
        let scaled = Matrix::from_fn(n, n, |r, c| u[(r, c)] * self.eigenvalues[c]);
        scaled.matmul_t(u).expect("square factors")
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(m + mᵀ)/2` after checking that its
/// asymmetry is below [`SYMMETRY_TOL`]. Eigenvalues are returned in
/// descending order; equal eigenvalues keep the order in which they sit on
/// the diagonal after convergence. Each eigenvector is signed so its
/// largest-magnitude entry is positive.
pub fn sym_eig(m: &Matrix) -> Result<SymEig, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    m.check_finite("eigendecomposition input")?;
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(LinalgError::Dimension(format!("matrix is not symmetric (asymmetry {asym:e})")));
    }
    let n = m.rows();
    let mut a = m.symmetrized()?;
    // Row k of `vt` holds eigenvector k, so rotations touch contiguous memory.
    let mut vt = Matrix::identity(n);

    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)].abs();
            }
        }
        if off == 0.0 {
            break;
        }
        let thresh = if sweep < 3 { 0.2 * off / (n * n) as f64 } else { 0.0 };
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let g = 100.0 * apq.abs();
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                if apq.abs() <= thresh || apq == 0.0 {
                    continue;
                }
                rotate(&mut a, &mut vt, p, q);
            }
        }
    }

    let raw: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| raw[j].total_cmp(&raw[i]));

    let mut eigenvectors = Matrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        let mut v = vt.row(src).to_vec();
        canonical_sign(&mut v);
        eigenvectors.set_column(k, &v);
        eigenvalues.push(raw[src]);
    }
    Ok(SymEig { eigenvalues, eigenvectors })
}

/// [`sym_eig`] for second-moment matrices: small negative eigenvalues
/// produced by rounding are clamped to zero, larger ones are an error.
pub fn sym_eig_psd(m: &Matrix) -> Result<SymEig, LinalgError> {
    let mut eig = sym_eig(m)?;
    let top = eig.eigenvalues.first().copied().unwrap_or(0.0).abs().max(1.0);
    for v in &mut eig.eigenvalues {
        if *v < 0.0 {
            if *v < -PSD_CLAMP_TOL * top {
                return Err(LinalgError::NotPsd(*v));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// One Jacobi rotation annihilating `a[p][q]`.
fn rotate(a: &mut Matrix, vt: &mut Matrix, p: usize, q: usize) {
    let n = a.rows();
    let apq = a[(p, q)];
    let h = a[(q, q)] - a[(p, p)];
    let t = if (h.abs() + 100.0 * apq.abs()) == h.abs() {
        apq / h
    } else {
        let theta = 0.5 * h / apq;
        let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
        if theta < 0.0 {
            -t
        } else {
            t
        }
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(p, k)];
        let akq = a[(q, k)];
        let new_p = c * akp - s * akq;
        let new_q = s * akp + c * akq;
        a[(p, k)] = new_p;
        a[(k, p)] = new_p;
        a[(q, k)] = new_q;
        a[(k, q)] = new_q;
    }
    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;

    let data = vt.as_mut_slice();
    let (lo, hi) = data.split_at_mut(q * n);
    let row_p = &mut lo[p * n..(p + 1) * n];
    let row_q = &mut hi[..n];
    for (vp, vq) in row_p.iter_mut().zip(row_q.iter_mut()) {
        let x = *vp;
        let y = *vq;
        *vp = c * x - s * y;
        *vq = s * x + c * y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        b.add(&b.transpose()).unwrap()
    }

    fn orthogonality_error(u: &Matrix) -> f64 {
        u.t_matmul(u).unwrap().sub(&Matrix::identity(u.cols())).unwrap().frobenius_norm()
    }

    fn max_residual(m: &Matrix, eig: &SymEig) -> f64 {
        (0..eig.dim())
            .map(|k| {
                let v = eig.eigenvectors.column(k);
                let mv = m.matmul(&Matrix::from_vec(v.len(), 1, v.clone()).unwrap()).unwrap();
                mv.as_slice()
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a - eig.eigenvalues[k] * b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_case() {
        let eig = sym_eig(&Matrix::identity(4)).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0; 4]);
        assert!(orthogonality_error(&eig.eigenvectors) < 1e-15);
    }

    #[test]
    fn diagonal_case_sorts_descending() {
        let eig = sym_eig(&Matrix::diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(eig.eigenvalues, vec![3.0, 2.0, 1.0]);
        let expected = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(eig.eigenvectors, expected);
    }

    #[test]
    fn random_8x8_residuals() {
        let m = random_symmetric(8, 11);
        let eig = sym_eig(&m).unwrap();
        assert!(max_residual(&m, &eig) <= 1e-8 * m.frobenius_norm());
        assert!(orthogonality_error(&eig.eigenvectors) <= 1e-8);
        assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(eig.reconstruct().rel_frobenius_error(&m).unwrap() <= 1e-8);
    }

    #[test]
    fn large_matrix_residuals() {
        for (n, seed) in [(64, 1), (200, 2), (512, 3)] {
            let m = random_symmetric(n, seed);
            let eig = sym_eig(&m).unwrap();
            assert!(max_residual(&m, &eig) <= 1e-8 * m.frobenius_norm(), "n={n}");
            assert!(orthogonality_error(&eig.eigenvectors) <= 1e-8, "n={n}");
        }
    }

    #[test]
    fn deterministic_output() {
        let m = random_symmetric(16, 5);
        assert_eq!(sym_eig(&m).unwrap(), sym_eig(&m).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(LinalgError::Dimension(_))));
        let mut m = Matrix::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(sym_eig(&m), Err(LinalgError::NonFinite(_))));
        let mut m = Matrix::identity(2);
        m[(0, 1)] = 0.5;
        assert!(sym_eig(&m).is_err());
    }

    #[test]
    fn tiny_asymmetry_is_symmetrized() {
        let mut m = Matrix::identity(3);
        m[(0, 1)] = 1e-12;
        let eig = sym_eig(&m).unwrap();
        assert!((eig.eigenvalues[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn psd_clamping() {
        // rank-one second moment: exact eigenvalues [14, 0, 0]
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let gram = a.t_matmul(&a).unwrap();
        let eig = sym_eig_psd(&gram).unwrap();
        assert!((eig.eigenvalues[0] - 14.0).abs() < 1e-12);
        assert!(eig.eigenvalues[1..].iter().all(|&v| v >= 0.0));
        assert!(matches!(sym_eig_psd(&Matrix::diag(&[1.0, -0.5])), Err(LinalgError::NotPsd(_))));
    }
}
