//! Kronecker-factored curvature statistics for MLP projections.
//!
//! For a projection `y = W x` the Fisher block of `W` is approximated by
//! `G ⊗ A` with `A = E[x xᵀ]` over input activations and `G = E[g gᵀ]` over
//! gradients with respect to the projection output.

mod collect;
mod fisher;

use std::path::Path;

use serde_json::{Map, Value};
use thiserror::Error;

pub use collect::{collect_factors, projection_statistics, CollectConfig};
pub use fisher::{kfac_vs_exact_fisher_check, FisherCheck};

use crate::container::{self, ContainerError};
use crate::linalg::{sym_eig_psd, LinalgError, Matrix, SymEig};
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum KfacError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("position counter overflow")]
    CounterOverflow,
    #[error("no positions accumulated for {0}")]
    Empty(String),
    #[error("problem too large for the exact check: {0}")]
    TooLarge(String),
    #[error("factor file: {0}")]
    Format(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Running sums `Σ aᵀa`, `Σ gᵀg` for one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacAccumulator {
    pub layer: String,
    a_sum: Matrix,
    g_sum: Matrix,
    positions: u64,
}

impl KfacAccumulator {
    pub fn new(layer: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { layer: layer.into(), a_sum: Matrix::zeros(d_in, d_in), g_sum: Matrix::zeros(d_out, d_out), positions: 0 }
    }

    pub fn positions(&self) -> u64 {
        self.positions
    }

    /// Adds one block of positions: rows of `a` are inputs, rows of `g` the
    /// matching output gradients.
    pub fn accumulate(&mut self, a: &Matrix, g: &Matrix) -> Result<(), KfacError> {
        if a.cols() != self.a_sum.rows() || g.cols() != self.g_sum.rows() || a.rows() != g.rows() {
            return Err(KfacError::Shape(format!(
                "{}: activations {}×{} and gradients {}×{} for factors of size {} and {}",
                self.layer,
                a.rows(),
                a.cols(),
                g.rows(),
                g.cols(),
                self.a_sum.rows(),
                self.g_sum.rows()
            )));
        }
        self.positions = self.positions.checked_add(a.rows() as u64).ok_or(KfacError::CounterOverflow)?;
        self.a_sum = self.a_sum.add(&a.t_matmul(a)?)?;
        self.g_sum = self.g_sum.add(&g.t_matmul(g)?)?;
        Ok(())
    }

    /// Adds another shard's partial sums.
    pub fn merge(&mut self, other: &Self) -> Result<(), KfacError> {
        if self.a_sum.shape() != other.a_sum.shape() || self.g_sum.shape() != other.g_sum.shape() {
            return Err(KfacError::Shape(format!("cannot merge shards of {} and {}", self.layer, other.layer)));
        }
        self.positions = self.positions.checked_add(other.positions).ok_or(KfacError::CounterOverflow)?;
        self.a_sum = self.a_sum.add(&other.a_sum)?;
        self.g_sum = self.g_sum.add(&other.g_sum)?;
        Ok(())
    }

    /// Pairwise (tree) reduction of shards, so the result does not depend on
    /// how the shards were ordered beyond rounding of a balanced sum.
    pub fn merge_all(mut shards: Vec<Self>) -> Result<Self, KfacError> {
        if shards.is_empty() {
            return Err(KfacError::Empty("shard list".into()));
        }
        while shards.len() > 1 {
            let mut next = Vec::with_capacity(shards.len().div_ceil(2));
            let mut it = shards.into_iter();
            while let Some(mut a) = it.next() {
                if let Some(b) = it.next() {
                    a.merge(&b)?;
                }
                next.push(a);
            }
            shards = next;
        }
        Ok(shards.pop().expect("one shard left"))
    }

    /// Normalizes by the position count and eigendecomposes both factors.
    pub fn finalize(&self) -> Result<KfacFactors, KfacError> {
        if self.positions == 0 {
            return Err(KfacError::Empty(self.layer.clone()));
        }
        let n = self.positions as f64;
        KfacFactors::from_factors(&self.layer, self.a_sum.scale(1.0 / n), self.g_sum.scale(1.0 / n), self.positions)
    }
}

/// Finalized `(A, G)` for one projection with their eigendecompositions
/// (`μ` = eigenvalues of A, `λ` = eigenvalues of G).
#[derive(Debug, Clone, PartialEq)]
pub struct KfacFactors {
    pub layer: String,
    pub a: Matrix,
    pub g: Matrix,
    pub positions_seen: u64,
    pub eig_a: SymEig,
    pub eig_g: SymEig,
}

impl KfacFactors {
    pub fn from_factors(layer: &str, a: Matrix, g: Matrix, positions_seen: u64) -> Result<Self, KfacError> {
        if positions_seen == 0 {
            return Err(KfacError::Empty(layer.to_string()));
        }
        let a = a.symmetrized()?;
        let g = g.symmetrized()?;
        let eig_a = sym_eig_psd(&a)?;
        let eig_g = sym_eig_psd(&g)?;
        Ok(Self { layer: layer.to_string(), a, g, positions_seen, eig_a, eig_g })
    }

    pub fn d_in(&self) -> usize {
        self.a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.g.rows()
    }

    pub fn kron_spectrum(&self) -> KronSpectrum {
        KronSpectrum::new(&self.eig_g.eigenvalues, &self.eig_a.eigenvalues)
    }

    /// Writes the factors and eigendecompositions in the tensor container
    /// format. Payloads are 32-bit.
    pub fn save(&self, path: &Path) -> Result<(), KfacError> {
        let mut meta = Map::new();
        meta.insert("format".into(), Value::from("curvedit-kfac-factors"));
        meta.insert("layer".into(), Value::from(self.layer.clone()));
        meta.insert("positions_seen".into(), Value::from(self.positions_seen));
        let ea = Matrix::row_vector(&self.eig_a.eigenvalues);
        let eg = Matrix::row_vector(&self.eig_g.eigenvalues);
        container::write_file(
            path,
            &meta,
            &[
                ("A", &self.a),
                ("G", &self.g),
                ("eigvals_a", &ea),
                ("eigvecs_a", &self.eig_a.eigenvectors),
                ("eigvals_g", &eg),
                ("eigvecs_g", &self.eig_g.eigenvectors),
            ],
        )?;
        Ok(())
    }

    /// Reads a factor file. The eigendecompositions are recomputed from the
    /// stored `A` and `G` so that they are orthogonal to working precision.
    pub fn load(path: &Path) -> Result<Self, KfacError> {
        let c = container::read_file(path)?;
        let layer = c.meta.get("layer").and_then(Value::as_str).ok_or_else(|| KfacError::Format("missing layer".into()))?;
        let positions = c
            .meta
            .get("positions_seen")
            .and_then(Value::as_u64)
            .ok_or_else(|| KfacError::Format("missing positions_seen".into()))?;
        let get = |n: &str| c.get(n).cloned().ok_or_else(|| KfacError::Format(format!("missing tensor {n}")));
        Self::from_factors(layer, get("A")?, get("G")?, positions)
    }
}

/// One Kronecker eigen-pair: G-eigenindex `i`, A-eigenindex `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KronPair {
    pub i: usize,
    pub j: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KronSpectrum {
    /// Sorted by mass descending, ties by `(i, j)` ascending.
    pub pairs: Vec<KronPair>,
    pub total_mass: f64,
}

impl KronSpectrum {
    pub fn new(lambda: &[f64], mu: &[f64]) -> Self {
        let mut pairs: Vec<KronPair> = lambda
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| mu.iter().enumerate().map(move |(j, &m)| KronPair { i, j, mass: l * m }))
            .collect();
        pairs.sort_by(|x, y| y.mass.total_cmp(&x.mass).then((x.i, x.j).cmp(&(y.i, y.j))));
        let total_mass = lambda.iter().sum::<f64>() * mu.iter().sum::<f64>();
        Self { pairs, total_mass }
    }

    /// Length of the shortest prefix whose cumulative mass reaches
    /// `rho · total_mass`. `rho ≥ 1` keeps every pair, including zero-mass ones.
    pub fn prefix_len_for(&self, rho: f64) -> usize {
        if rho >= 1.0 {
            return self.pairs.len();
        }
        let target = rho * self.total_mass;
        let mut acc = 0.0;
        for (k, p) in self.pairs.iter().enumerate() {
            acc += p.mass;
            if acc >= target {
                return k + 1;
            }
        }
        self.pairs.len()
    }
}
