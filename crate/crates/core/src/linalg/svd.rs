use serde::{Deserialize, Serialize};

use super::{canonical_sign, LinalgError, Matrix};

const MAX_SWEEPS: usize = 80;

/// Singular values below `RANK_TOL * s_max` are reported as exact zeros.
pub const RANK_TOL: f64 = 1e-10;

/// Thin SVD `m = u · diag(singular_values) · vt` with `k = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svd {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `k × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.singular_values.iter().filter(|&&s| s > 0.0).count()
    }

    /// `U_r diag(s_r) V_rᵀ` using the leading `r` triples.
    pub fn reconstruct_top(&self, r: usize) -> Matrix {
        let r = r.min(self.singular_values.len());
        let us = Matrix::from_fn(self.u.rows(), r, |i, k| self.u[(i, k)] * self.singular_values[k]);
        let vt_r = self.vt.slice_rows(0, r);
        us.matmul(&vt_r).expect("conforming factors")
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_top(self.singular_values.len())
    }
}

/// Singular value decomposition by one-sided Jacobi rotations.
///
/// The rotations diagonalize the Gram matrix of the smaller dimension
/// implicitly, so the result is the eigendecomposition of `mᵀm` (or `m mᵀ`)
/// without squaring the condition number. Each right singular vector is
/// signed so its largest-magnitude entry is positive.
pub fn svd(m: &Matrix) -> Result<Svd, LinalgError> {
    m.check_finite("svd input")?;
    if m.rows() >= m.cols() {
        tall_svd(m)
    } else {
        let t = tall_svd(&m.transpose())?;
        // mᵀ = U S Vᵀ  ⇒  m = V S Uᵀ; re-sign so the new right vectors are canonical.
        let mut u = t.vt.transpose();
        let mut vt = t.u.transpose();
        for k in 0..t.singular_values.len() {
            let mut v = vt.row(k).to_vec();
            if canonical_sign(&mut v) {
                vt.row_mut(k).copy_from_slice(&v);
                let col: Vec<f64> = u.column(k).iter().map(|x| -x).collect();
                u.set_column(k, &col);
            }
        }
        Ok(Svd { u, singular_values: t.singular_values, vt })
    }
}

fn tall_svd(m: &Matrix) -> Result<Svd, LinalgError> {
    let (rows, n) = m.shape();
    // Columns stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (rows.max(1) as f64);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                rotate_pair(&mut left[p], &mut right[0], c, s);
                let (left, right) = v.split_at_mut(q);
                rotate_pair(&mut left[p], &mut right[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s_max = order.first().map_or(0.0, |&i| norms[i]);
    let cutoff = RANK_TOL * s_max;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut vt = Matrix::zeros(n, n);
    let mut pending = Vec::new();
    for (k, &src) in order.iter().enumerate() {
        let mut vk = v[src].clone();
        let mut uk = cols[src].clone();
        if canonical_sign(&mut vk) {
            uk.iter_mut().for_each(|x| *x = -*x);
        }
        vt.row_mut(k).copy_from_slice(&vk);
        if norms[src] > cutoff && norms[src] > 0.0 {
            uk.iter_mut().for_each(|x| *x /= norms[src]);
            singular_values.push(norms[src]);
            u_cols.push(uk);
        } else {
            singular_values.push(0.0);
            pending.push(k);
            u_cols.push(Vec::new());
        }
    }
    complete_basis(&mut u_cols, &pending, rows);

    let mut u = Matrix::zeros(rows, n);
    for (k, col) in u_cols.iter().enumerate() {
        u.set_column(k, col);
    }
    Ok(Svd { u, singular_values, vt })
}

/// Fills the `missing` slots with unit vectors orthogonal to every other slot,
/// drawn deterministically from the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], dim: usize) {
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < dim, "standard basis exhausted while completing orthonormal set");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.is_empty() {
                        continue;
                    }
                    let proj = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = e;
                break;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn rotate_pair(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let xa = *a;
        let yb = *b;
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthogonality_error(u: &Matrix) -> f64 {
        u.t_matmul(u).unwrap().sub(&Matrix::identity(u.cols())).unwrap().frobenius_norm()
    }

    fn check(m: &Matrix) -> Svd {
        let s = svd(m).unwrap();
        assert!(s.reconstruct().rel_frobenius_error(m).unwrap() <= 1e-8);
        assert!(orthogonality_error(&s.u) <= 1e-8);
        assert!(orthogonality_error(&s.vt.transpose()) <= 1e-8);
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.singular_values.iter().all(|&v| v >= 0.0));
        s
    }

    #[test]
    fn identity_case() {
        let s = check(&Matrix::identity(3));
        assert_eq!(s.singular_values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn rank_one_outer_product() {
        // ‖u‖ = 2, ‖v‖ = 3
        let u = Matrix::from_vec(4, 1, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let v = Matrix::from_vec(1, 3, vec![1.0, 2.0, 2.0]).unwrap();
        let m = u.matmul(&v).unwrap();
        let s = check(&m);
        assert!((s.singular_values[0] - 6.0).abs() < 1e-12);
        assert_eq!(&s.singular_values[1..], &[0.0, 0.0]);
        assert_eq!(s.rank(), 1);
        let wide = check(&m.transpose());
        assert!((wide.singular_values[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        let m = random(6, 4, 7);
        let s = check(&m);
        let gram = sym_eig(&m.t_matmul(&m).unwrap()).unwrap();
        for (sv, ev) in s.singular_values.iter().zip(&gram.eigenvalues) {
            assert!((sv - ev.max(0.0).sqrt()).abs() <= 1e-8, "{sv} vs {}", ev.sqrt());
        }
    }

    #[test]
    fn wide_and_square_shapes() {
        check(&random(4, 9, 1));
        check(&random(32, 32, 2));
        check(&random(128, 64, 3));
        check(&Matrix::zeros(3, 2));
    }

    #[test]
    fn right_vectors_are_canonically_signed() {
        let s = svd(&random(5, 5, 9)).unwrap();
        for k in 0..5 {
            let row = s.vt.row(k);
            let big = row.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix::identity(2);
        m[(1, 1)] = f64::INFINITY;
        assert!(matches!(svd(&m), Err(LinalgError::NonFinite(_))));
    }
}
