//! Weight edits: curvature-mass pair selection, SVD truncation and a trained
//! sparse mask.

mod bsn;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bsn::{bsn_mask_edit, BsnOutcome, BsnParams};

use crate::kfac::{KfacFactors, KronSpectrum};
use crate::linalg::{svd, LinalgError, Matrix};
use crate::nn::{parse_projection_name, Dataset, ModelCheckpoint, NnError};

#[derive(Debug, Error)]
pub enum EditError {
    #[error("invalid edit plan: {0}")]
    Plan(String),
    #[error("degenerate curvature for {0}: a factor has zero total mass")]
    DegenerateCurvature(String),
    #[error("no factors for {0}")]
    MissingFactors(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask training diverged at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum EditMethod {
    KfacPairs { rho: f64 },
    SvdTruncate { keep_fraction: f64 },
    BsnMask(BsnParams),
}

impl EditMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EditMethod::KfacPairs { .. } => "kfac_pairs",
            EditMethod::SvdTruncate { .. } => "svd_truncate",
            EditMethod::BsnMask(_) => "bsn_mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    #[serde(flatten)]
    pub method: EditMethod,
    /// Projection names, `layer{i}.{gate|up|down}`.
    pub targets: Vec<String>,
}

impl EditPlan {
    pub fn validate(&self) -> Result<(), EditError> {
        if self.targets.is_empty() {
            return Err(EditError::Plan("no targets".into()));
        }
        for t in &self.targets {
            if parse_projection_name(t).is_none() {
                return Err(EditError::Plan(format!("target {t:?} is not a projection name")));
            }
        }
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        match &self.method {
            EditMethod::KfacPairs { rho } if !in_unit(*rho) => Err(EditError::Plan(format!("rho {rho} outside (0, 1]"))),
            EditMethod::SvdTruncate { keep_fraction } if !in_unit(*keep_fraction) => {
                Err(EditError::Plan(format!("keep fraction {keep_fraction} outside (0, 1]")))
            }
            EditMethod::BsnMask(p) => p.validate(),
            _ => Ok(()),
        }
    }
}

/// Per-projection bookkeeping of an edit.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerEdit {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retained_mass_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs_kept: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_kept: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_density: Option<f64>,
    /// `‖W' − W‖_F / ‖W‖_F`.
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub plan: EditPlan,
    pub layers: BTreeMap<String, LayerEdit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEdit {
    pub weights: Matrix,
    pub pairs_kept: usize,
    pub total_pairs: usize,
    pub retained_mass_fraction: f64,
}

/// Keeps the weight components `C_ij u_i v_jᵀ` of the highest-curvature
/// Kronecker pairs until their cumulative mass reaches `rho` of the total.
///
/// `C = U_Gᵀ W U_A`; the result is `U_G (C ⊙ M) U_Aᵀ`.
pub fn kfac_pair_edit(w: &Matrix, factors: &KfacFactors, rho: f64) -> Result<PairEdit, EditError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(EditError::Plan(format!("rho {rho} outside (0, 1]")));
    }
    if w.shape() != (factors.d_out(), factors.d_in()) {
        return Err(EditError::Shape(format!(
            "{}: weights {:?} vs factors G {} and A {}",
            factors.layer,
            w.shape(),
            factors.d_out(),
            factors.d_in()
        )));
    }
    let lambda = &factors.eig_g.eigenvalues;
    let mu = &factors.eig_a.eigenvalues;
    if lambda.iter().sum::<f64>() <= 0.0 || mu.iter().sum::<f64>() <= 0.0 {
        return Err(EditError::DegenerateCurvature(factors.layer.clone()));
    }
    let ug = &factors.eig_g.eigenvectors;
    let ua = &factors.eig_a.eigenvectors;
    let c = ug.t_matmul(w)?.matmul(ua)?;
    let spectrum = KronSpectrum::new(lambda, mu);
    let k = spectrum.prefix_len_for(rho);
    let mut masked = Matrix::zeros(c.rows(), c.cols());
    let mut kept_mass = 0.0;
    for p in &spectrum.pairs[..k] {
        masked.as_mut_slice()[p.i * c.cols() + p.j] = c[(p.i, p.j)];
        kept_mass += p.mass;
    }
    let weights = ug.matmul(&masked)?.matmul_t(ua)?;
    Ok(PairEdit {
        weights,
        pairs_kept: k,
        total_pairs: spectrum.pairs.len(),
        retained_mass_fraction: kept_mass / spectrum.total_mass,
    })
}

/// Number of singular triples kept for a fraction of `min(rows, cols)`.
pub fn svd_keep_rank(keep_fraction: f64, rows: usize, cols: usize) -> usize {
    let n = rows.min(cols);
    // the small slack absorbs products such as 0.7 · 10 = 7.000000000000001
    let r = (keep_fraction * n as f64 - 1e-9).ceil().max(1.0) as usize;
    r.min(n)
}

/// Best rank-`r` approximation with `r = ceil(keep_fraction · min(rows, cols))`.
pub fn svd_truncate_edit(w: &Matrix, keep_fraction: f64) -> Result<(Matrix, usize), EditError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(EditError::Plan(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let r = svd_keep_rank(keep_fraction, w.rows(), w.cols());
    Ok((svd(w)?.reconstruct_top(r), r))
}

/// Training data needed by the mask edit.
pub struct MaskData<'a> {
    pub forget: &'a Dataset,
    pub retain: &'a Dataset,
}

/// Applies `plan` to `model`. Curvature edits need `factors` for every
/// target; the mask edit needs `mask_data`. Each layer is edited against
/// statistics of the unedited model.
pub fn apply_plan(
    model: &ModelCheckpoint,
    plan: &EditPlan,
    factors: Option<&BTreeMap<String, KfacFactors>>,
    mask_data: Option<MaskData<'_>>,
) -> Result<(ModelCheckpoint, EditOutcome), EditError> {
    plan.validate()?;
    for t in &plan.targets {
        model.get(t)?;
    }
    let mut edited = model.clone();
    let mut layers = BTreeMap::new();
    match &plan.method {
        EditMethod::KfacPairs { rho } => {
            let factors = factors.ok_or_else(|| EditError::MissingFactors(plan.targets.join(", ")))?;
            for t in &plan.targets {
                let f = factors.get(t).ok_or_else(|| EditError::MissingFactors(t.clone()))?;
                let w = model.get(t)?;
                let e = kfac_pair_edit(w, f, *rho)?;
                let change = e.weights.sub(w)?.frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE);
                edited.set(t, e.weights)?;
                layers.insert(
                    t.clone(),
                    LayerEdit {
                        retained_mass_fraction: Some(e.retained_mass_fraction),
                        pairs_kept: Some(e.pairs_kept),
                        total_pairs: Some(e.total_pairs),
                        relative_change: change,
                        ..LayerEdit::default()
                    },
                );
            }
        }
        EditMethod::SvdTruncate { keep_fraction } => {
            for t in &plan.targets {
                let w = model.get(t)?;
                let (nw, r) = svd_truncate_edit(w, *keep_fraction)?;
                let change = nw.sub(w)?.frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE);
                edited.set(t, nw)?;
                layers.insert(t.clone(), LayerEdit { rank_kept: Some(r), relative_change: change, ..LayerEdit::default() });
            }
        }
        EditMethod::BsnMask(params) => {
            let data = mask_data.ok_or_else(|| EditError::Plan("mask edit needs forget and retain sets".into()))?;
            let out = bsn_mask_edit(model, data.forget, data.retain, &plan.targets, params)?;
            for (t, density) in &out.densities {
                let w = model.get(t)?;
                let change = out.model.get(t)?.sub(w)?.frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE);
                layers.insert(t.clone(), LayerEdit { mask_density: Some(*density), relative_change: change, ..LayerEdit::default() });
            }
            edited = out.model;
        }
    }
    Ok((edited, EditOutcome { plan: plan.clone(), layers }))
}
