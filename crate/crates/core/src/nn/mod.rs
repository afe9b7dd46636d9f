//! Desk-scale models with hand-written forward and backward passes.
//!
//! Two architectures share one parameter container ([`ModelCheckpoint`]):
//! a residual MLP classifier and a decoder-only transformer LM. Both expose
//! the inputs and output-side gradients of their MLP projections so that
//! curvature statistics can be collected without a separate hook system.

pub mod arch;
mod checkpoint;
mod classifier;
mod decode;
mod lm;
pub mod ops;
mod train;

use std::collections::BTreeMap;

use thiserror::Error;

pub use arch::{parse_projection_name, projection_name, ArchSpec, ClassifierArch, LmArch, Projection};
pub use checkpoint::{ModelCheckpoint, NamedTensor, TrainMeta};
pub use decode::{greedy_decode, greedy_decode_batch};
pub use train::{evaluate_loss, train, train_with_progress, Dataset, OptimizerKind, TrainConfig, TrainOutcome};

use crate::container::ContainerError;
use crate::linalg::{LinalgError, Matrix};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("sequence of {needed} tokens exceeds context length {context}")]
    ContextOverflow { needed: usize, context: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// A minibatch for either architecture.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    /// Equal-length token sequences; targets are the next tokens.
    Tokens(&'a [Vec<u32>]),
    /// Feature rows with one label per row (`labels` may be empty when no
    /// ground truth exists).
    Features { x: &'a Matrix, labels: &'a [usize] },
}

/// Which labels drive the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    GroundTruth,
    /// One label per position drawn from the model's own softmax, which makes
    /// the gradient outer products an unbiased Fisher estimate.
    ModelSampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

pub(crate) enum Cache {
    Lm(lm::LmCache),
    Classifier(classifier::ClsCache),
}

/// Logits plus everything the backward pass and the curvature statistics need.
pub struct Forward {
    /// One row per position (`batch × seq_len` for the LM, row-major by sequence).
    pub logits: Matrix,
    /// Ground-truth target per logits row; `None` where no loss applies
    /// (the final position of each sequence, or unlabeled features).
    pub targets: Vec<Option<usize>>,
    /// Rows that contribute a loss term: every position but the last for the
    /// LM, every row for the classifier.
    pub loss_rows: Vec<usize>,
    pub(crate) cache: Cache,
}

impl Forward {
    /// Input activations of a projection restricted to [`Forward::loss_rows`].
    pub fn projection_inputs(&self, layer: usize, proj: Projection) -> Result<Matrix, NnError> {
        let full = match &self.cache {
            Cache::Lm(c) => {
                if layer >= c.layers.len() {
                    return Err(NnError::MissingTensor(projection_name(layer, proj)));
                }
                c.projection_input(layer, proj)
            }
            Cache::Classifier(c) => {
                if layer >= c.blocks.len() {
                    return Err(NnError::MissingTensor(projection_name(layer, proj)));
                }
                c.projection_input(layer, proj)
                    .ok_or_else(|| NnError::MissingTensor(projection_name(layer, proj)))?
            }
        };
        Ok(full.select_rows(&self.loss_rows))
    }

    /// Residual stream (all rows) entering block `layer`; LM only.
    pub fn residual(&self, layer: usize) -> Option<&Matrix> {
        match &self.cache {
            Cache::Lm(c) => Some(c.residual(layer)),
            Cache::Classifier(_) => None,
        }
    }

    /// `(batch, seq_len)` of the LM batch, `(rows, 1)` for features.
    pub fn batch_shape(&self) -> (usize, usize) {
        match &self.cache {
            Cache::Lm(c) => (c.batch, c.seq_len),
            Cache::Classifier(_) => (self.logits.rows(), 1),
        }
    }
}

/// Result of [`backward`].
pub struct Backward {
    pub loss: f64,
    pub n_targets: usize,
    /// Aligned with `model.tensors`.
    pub grads: Vec<Matrix>,
    /// Output-side gradient of each MLP projection, rows = [`Forward::loss_rows`].
    pub output_grads: BTreeMap<String, Matrix>,
    /// Labels actually used, per logits row.
    pub labels: Vec<Option<usize>>,
}

pub fn forward(model: &ModelCheckpoint, batch: Batch<'_>) -> Result<Forward, NnError> {
    match (&model.arch, batch) {
        (ArchSpec::Lm(arch), Batch::Tokens(seqs)) => {
            let (logits, cache) = lm::forward(model, arch, seqs)?;
            let (b, l) = (cache.batch, cache.seq_len);
            let mut targets = Vec::with_capacity(b * l);
            let mut loss_rows = Vec::with_capacity(b * (l - 1));
            for (s, seq) in seqs.iter().enumerate() {
                for t in 0..l {
                    if t + 1 < l {
                        targets.push(Some(seq[t + 1] as usize));
                        loss_rows.push(s * l + t);
                    } else {
                        targets.push(None);
                    }
                }
            }
            Ok(Forward { logits, targets, loss_rows, cache: Cache::Lm(cache) })
        }
        (ArchSpec::Classifier(arch), Batch::Features { x, labels }) => {
            if !labels.is_empty() && labels.len() != x.rows() {
                return Err(NnError::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= arch.n_classes) {
                return Err(NnError::Shape(format!("label {bad} outside {} classes", arch.n_classes)));
            }
            let (logits, cache) = classifier::forward(model, arch, x)?;
            let targets = if labels.is_empty() {
                vec![None; x.rows()]
            } else {
                labels.iter().map(|&y| Some(y)).collect()
            };
            Ok(Forward { logits, targets, loss_rows: (0..x.rows()).collect(), cache: Cache::Classifier(cache) })
        }
        _ => Err(NnError::Shape("batch kind does not match the model architecture".into())),
    }
}

/// Cross-entropy backward pass.
///
/// With [`LabelMode::ModelSampled`] one label per loss row is drawn from the
/// model's softmax using `rng`; ground-truth targets are ignored.
pub fn backward(
    model: &ModelCheckpoint,
    fwd: &Forward,
    mode: LabelMode,
    rng: &mut Rng,
    reduction: Reduction,
) -> Result<Backward, NnError> {
    let labels: Vec<Option<usize>> = match mode {
        LabelMode::GroundTruth => fwd.targets.clone(),
        LabelMode::ModelSampled => {
            let mut labels = vec![None; fwd.logits.rows()];
            let mut probs = vec![0.0; fwd.logits.cols()];
            for &r in &fwd.loss_rows {
                probs.copy_from_slice(fwd.logits.row(r));
                ops::softmax_in_place(&mut probs);
                labels[r] = Some(ops::sample_categorical(&probs, rng));
            }
            labels
        }
    };
    let (loss, mut dlogits, n_targets) = ops::cross_entropy(&fwd.logits, &labels);
    if n_targets == 0 {
        return Err(NnError::Shape("batch has no labeled positions".into()));
    }
    let (loss, scale) = match reduction {
        Reduction::Sum => (loss, 1.0),
        Reduction::Mean => (loss / n_targets as f64, 1.0 / n_targets as f64),
    };
    if scale != 1.0 {
        dlogits.scale_in_place(scale);
    }
    let (grads, full_out) = match (&model.arch, &fwd.cache) {
        (ArchSpec::Lm(arch), Cache::Lm(c)) => lm::backward(model, arch, c, &dlogits)?,
        (ArchSpec::Classifier(arch), Cache::Classifier(c)) => classifier::backward(model, arch, c, &dlogits)?,
        _ => return Err(NnError::Shape("forward cache does not match the model architecture".into())),
    };
    let output_grads = full_out.into_iter().map(|(k, g)| (k, g.select_rows(&fwd.loss_rows))).collect();
    Ok(Backward { loss, n_targets, grads, output_grads, labels })
}

/// Summed next-token / label cross-entropy of a batch and the number of
/// labeled positions, without the backward pass.
pub fn batch_loss(model: &ModelCheckpoint, batch: Batch<'_>) -> Result<(f64, usize), NnError> {
    let fwd = forward(model, batch)?;
    let (loss, _, n) = ops::cross_entropy(&fwd.logits, &fwd.targets);
    Ok((loss, n))
}
