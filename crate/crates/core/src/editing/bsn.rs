//! Simplified BalancedSubnet: a per-parameter score on each target
//! projection, binarized by a top-k threshold in the forward pass and
//! updated straight-through.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EditError;
use crate::linalg::Matrix;
use crate::nn::{backward, forward, Dataset, LabelMode, ModelCheckpoint, NnError, Reduction};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsnParams {
    /// Fraction of each target matrix that is zeroed.
    pub sparsity_ratio: f64,
    /// Weight of the retain loss; the forget loss gets `1 − loss_weight`.
    pub loss_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BsnParams {
    fn default() -> Self {
        Self { sparsity_ratio: 0.02, loss_weight: 0.7, epochs: 5, lr: 0.05, batch_size: 8, seed: 0 }
    }
}

impl BsnParams {
    pub fn validate(&self) -> Result<(), EditError> {
        let bad = |m: &str| Err(EditError::Plan(m.into()));
        if !(self.sparsity_ratio > 0.0 && self.sparsity_ratio <= 0.5) {
            return bad("sparsity ratio outside (0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.loss_weight) {
            return bad("loss weight outside [0, 1]");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

pub struct BsnOutcome {
    pub model: ModelCheckpoint,
    /// Fraction of surviving parameters per target.
    pub densities: BTreeMap<String, f64>,
    /// Objective per step.
    pub objective: Vec<f64>,
}

/// Zeroes the `floor(ratio · n)` lowest scores (ties: lower index first).
fn hard_mask(scores: &Matrix, ratio: f64) -> Matrix {
    let n = scores.len();
    let k = (ratio * n as f64).floor() as usize;
    let mut mask = Matrix::from_fn(scores.rows(), scores.cols(), |_, _| 1.0);
    if k > 0 {
        let s = scores.as_slice();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.select_nth_unstable_by(k - 1, |&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        for &i in &idx[..k] {
            mask.as_mut_slice()[i] = 0.0;
        }
    }
    mask
}

fn grads_for(model: &ModelCheckpoint, data: &Dataset, idx: &[usize], targets: &[usize]) -> Result<(f64, Vec<Matrix>), NnError> {
    let mut unused = rng::rng_from_seed(0);
    let bwd = data.with_batch(idx, |b| {
        let fwd = forward(model, b)?;
        backward(model, &fwd, LabelMode::GroundTruth, &mut unused, Reduction::Mean)
    })?;
    Ok((bwd.loss, targets.iter().map(|&t| bwd.grads[t].clone()).collect()))
}

/// Learns which parameters of `targets` to zero so that the forget-set loss
/// rises while the retain-set loss stays low.
///
/// Each step minimizes `loss_weight · CE(retain) − (1 − loss_weight) · CE(forget)`
/// through the masked weights `W ⊙ M(scores)`; the gradient with respect to
/// the scores is the gradient with respect to the mask. Scores start at
/// `|W|` and are updated with Adam.
pub fn bsn_mask_edit(
    model: &ModelCheckpoint,
    forget: &Dataset,
    retain: &Dataset,
    targets: &[String],
    params: &BsnParams,
) -> Result<BsnOutcome, EditError> {
    params.validate()?;
    if targets.is_empty() {
        return Err(EditError::Plan("no targets".into()));
    }
    if forget.is_empty() || retain.is_empty() {
        return Err(EditError::Plan("forget and retain sets must be non-empty".into()));
    }
    let tidx: Vec<usize> = targets
        .iter()
        .map(|t| model.index_of(t).ok_or_else(|| EditError::Nn(NnError::MissingTensor(t.clone()))))
        .collect::<Result<_, _>>()?;
    let originals: Vec<Matrix> = tidx.iter().map(|&i| model.tensors[i].value.clone()).collect();
    let mut scores: Vec<Matrix> = originals.iter().map(|w| w.map(f64::abs)).collect();
    let mut m1: Vec<Matrix> = originals.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    let mut m2 = m1.clone();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let mut working = model.clone();
    let apply_masks = |working: &mut ModelCheckpoint, scores: &[Matrix]| {
        for ((&i, w), s) in tidx.iter().zip(&originals).zip(scores) {
            let mask = hard_mask(s, params.sparsity_ratio);
            working.tensors[i].value = w.hadamard(&mask).expect("mask matches weights");
        }
    };

    let mut order_rng = rng::stream(params.seed, "bsn-order");
    let mut retain_order: Vec<usize> = Vec::new();
    let mut retain_cursor = 0;
    let mut objective = Vec::new();
    let mut step = 0usize;
    for _ in 0..params.epochs {
        let mut forget_order: Vec<usize> = (0..forget.len()).collect();
        rand::seq::SliceRandom::shuffle(forget_order.as_mut_slice(), &mut order_rng);
        for fchunk in forget_order.chunks(params.batch_size) {
            let mut ridx = Vec::with_capacity(params.batch_size);
            while ridx.len() < params.batch_size {
                if retain_cursor == retain_order.len() {
                    retain_order = (0..retain.len()).collect();
                    rand::seq::SliceRandom::shuffle(retain_order.as_mut_slice(), &mut order_rng);
                    retain_cursor = 0;
                }
                ridx.push(retain_order[retain_cursor]);
                retain_cursor += 1;
            }
            apply_masks(&mut working, &scores);
            let (lf, gf) = grads_for(&working, forget, fchunk, &tidx)?;
            let (lr_loss, gr) = grads_for(&working, retain, &ridx, &tidx)?;
            let obj = params.loss_weight * lr_loss - (1.0 - params.loss_weight) * lf;
            if !obj.is_finite() {
                return Err(EditError::Diverged(step));
            }
            objective.push(obj);
            let t = (step + 1) as i32;
            let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            for k in 0..tidx.len() {
                let w = originals[k].as_slice();
                let (gr, gf) = (gr[k].as_slice(), gf[k].as_slice());
                let (m, v) = (m1[k].as_mut_slice(), m2[k].as_mut_slice());
                let s = scores[k].as_mut_slice();
                for e in 0..s.len() {
                    let g = (params.loss_weight * gr[e] - (1.0 - params.loss_weight) * gf[e]) * w[e];
                    if !g.is_finite() {
                        return Err(EditError::Diverged(step));
                    }
                    m[e] = beta1 * m[e] + (1.0 - beta1) * g;
                    v[e] = beta2 * v[e] + (1.0 - beta2) * g * g;
                    s[e] -= params.lr * (m[e] / bc1) / ((v[e] / bc2).sqrt() + eps);
                }
            }
            step += 1;
        }
    }
    apply_masks(&mut working, &scores);
    let densities = targets
        .iter()
        .zip(&scores)
        .map(|(t, s)| {
            let m = hard_mask(s, params.sparsity_ratio);
            (t.clone(), m.as_slice().iter().sum::<f64>() / m.len() as f64)
        })
        .collect();
    Ok(BsnOutcome { model: working, densities, objective })
}

#[cfg(test)]
pub(super) fn mask_for_test(scores: &Matrix, ratio: f64) -> Matrix {
    hard_mask(scores, ratio)
}
