use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{KfacAccumulator, KfacError, KfacFactors};
use crate::linalg::Matrix;
use crate::nn::{self, parse_projection_name, Batch, Dataset, LabelMode, ModelCheckpoint, NnError, Reduction};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    /// Stop after this many contributing positions (fewer if the data runs out).
    pub max_positions: usize,
    pub batch_size: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { max_positions: 200_000, batch_size: 16, label_mode: LabelMode::ModelSampled, seed: 0 }
    }
}

/// Streams `data` through the model once (in a seeded order) and returns
/// finalized factors for every projection named in `targets`.
pub fn collect_factors(
    model: &ModelCheckpoint,
    data: &Dataset,
    targets: &[String],
    cfg: &CollectConfig,
) -> Result<BTreeMap<String, KfacFactors>, KfacError> {
    if targets.is_empty() {
        return Err(KfacError::Shape("no target projections".into()));
    }
    if cfg.max_positions == 0 || cfg.batch_size == 0 {
        return Err(KfacError::Shape("max_positions and batch_size must be positive".into()));
    }
    let mut accs = BTreeMap::new();
    let mut parsed = Vec::new();
    for t in targets {
        let (layer, proj) = parse_projection_name(t).ok_or_else(|| NnError::MissingTensor(t.clone()))?;
        let w = model.get(t)?;
        accs.insert(t.clone(), KfacAccumulator::new(t.clone(), w.cols(), w.rows()));
        parsed.push((t.clone(), layer, proj));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "kfac-order"));
    let mut label_rng = rng::stream(cfg.seed, "kfac-labels");
    let mut seen = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        if seen >= cfg.max_positions {
            break;
        }
        let fwd = match data {
            Dataset::Lm(seqs) => {
                let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
                nn::forward(model, Batch::Tokens(&batch))?
            }
            Dataset::Classifier { x, labels } => {
                let xb = x.select_rows(chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                nn::forward(model, Batch::Features { x: &xb, labels: &yb })?
            }
        };
        let bwd = nn::backward(model, &fwd, cfg.label_mode, &mut label_rng, Reduction::Sum)?;
        let rows = fwd.loss_rows.len().min(cfg.max_positions - seen);
        for (name, layer, proj) in &parsed {
            let a = fwd.projection_inputs(*layer, *proj)?;
            let g = bwd.output_grads.get(name).ok_or_else(|| NnError::MissingTensor(name.clone()))?;
            let (a, g) = if rows < a.rows() { (a.slice_rows(0, rows), g.slice_rows(0, rows)) } else { (a, g.clone()) };
            accs.get_mut(name).expect("accumulator exists").accumulate(&a, &g)?;
        }
        seen += rows;
    }
    accs.into_iter().map(|(k, acc)| Ok((k, acc.finalize()?))).collect()
}

/// Output gradients and inputs of one projection for a batch, exposed for
/// tests and diagnostics.
pub fn projection_statistics(
    model: &ModelCheckpoint,
    batch: Batch<'_>,
    name: &str,
    mode: LabelMode,
    seed: u64,
) -> Result<(Matrix, Matrix), KfacError> {
    let (layer, proj) = parse_projection_name(name).ok_or_else(|| NnError::MissingTensor(name.to_string()))?;
    let fwd = nn::forward(model, batch)?;
    let bwd = nn::backward(model, &fwd, mode, &mut rng::stream(seed, "kfac-labels"), Reduction::Sum)?;
    let g = bwd.output_grads.get(name).cloned().ok_or_else(|| NnError::MissingTensor(name.to_string()))?;
    Ok((fwd.projection_inputs(layer, proj)?, g))
}
