//! Dense real linear algebra.
//!
//! Everything here works on row-major `f64` [`Matrix`] values. The symmetric
//! eigensolver is a cyclic Jacobi iteration and the SVD is a one-sided
//! Jacobi iteration, both with a fixed sweep order so identical inputs give
//! bit-identical outputs.

mod eig;
mod matrix;
mod svd;

pub use eig::{sym_eig, sym_eig_psd, SymEig};
pub use matrix::Matrix;
pub use svd::{svd, Svd};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite entries in {0}")]
    NonFinite(String),
    #[error("matrix is not positive semidefinite: eigenvalue {0:e}")]
    NotPsd(f64),
}

impl LinalgError {
    pub(crate) fn shape_mismatch(op: &str, a: (usize, usize), b: (usize, usize)) -> Self {
        Self::Dimension(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
    }
}

/// Flips `v` in place so that its largest-magnitude entry (first on ties) is
/// positive. Returns whether a flip happened.
pub(crate) fn canonical_sign(v: &mut [f64]) -> bool {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
        true
    } else {
        false
    }
}
