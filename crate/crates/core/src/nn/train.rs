//! Minibatch training with AdamW or momentum SGD.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::ModelCheckpoint;
use super::{backward, batch_loss, forward, Batch, LabelMode, NnError, Reduction};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Linear warmup length; the rate then follows a cosine down to
    /// `min_lr_ratio × learning_rate`.
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

fn default_min_lr_ratio() -> f64 {
    0.1
}

fn default_grad_clip() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adamw,
            warmup_steps: 50,
            min_lr_ratio: default_min_lr_ratio(),
            grad_clip: default_grad_clip(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

/// Training data for either architecture.
#[derive(Debug, Clone)]
pub enum Dataset {
    Lm(Vec<Vec<u32>>),
    Classifier { x: Matrix, labels: Vec<usize> },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Lm(s) => s.len(),
            Dataset::Classifier { x, .. } => x.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs `f` on the minibatch made of rows `idx`.
    pub fn with_batch<T>(&self, idx: &[usize], f: impl FnOnce(Batch<'_>) -> T) -> T {
        match self {
            Dataset::Lm(seqs) => {
                let picked: Vec<Vec<u32>> = idx.iter().map(|&i| seqs[i].clone()).collect();
                f(Batch::Tokens(&picked))
            }
            Dataset::Classifier { x, labels } => {
                let xb = x.select_rows(idx);
                let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                f(Batch::Features { x: &xb, labels: &yb })
            }
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    /// Mean minibatch loss per step.
    pub losses: Vec<f64>,
}

pub fn train(model: ModelCheckpoint, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    train_with_progress(model, data, cfg, |_, _| {})
}

/// [`train`] with a callback invoked after every step with `(step, loss)`.
pub fn train_with_progress(
    mut model: ModelCheckpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome, NnError> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(NnError::Config("training dataset is empty".into()));
    }
    let mut order_rng = rng::stream(cfg.seed, "batches");
    // Only consumed by sampled-label training, which `train` never requests.
    let mut label_rng = rng::stream(cfg.seed, "labels");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let zeros = || model.tensors.iter().map(|t| Matrix::zeros(t.value.rows(), t.value.cols())).collect::<Vec<_>>();
    let mut m1 = zeros();
    let mut m2 = zeros();
    let decays: Vec<bool> = model.tensors.iter().map(|t| !t.name.ends_with("norm")).collect();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.98, 1e-8);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let bwd = data.with_batch(&idx, |batch| {
            let fwd = forward(&model, batch)?;
            backward(&model, &fwd, LabelMode::GroundTruth, &mut label_rng, Reduction::Mean)
        });
        let mut bwd = match bwd {
            Ok(b) => b,
            Err(NnError::NonFinite(_)) => return Err(NnError::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !bwd.loss.is_finite() {
            return Err(NnError::Diverged { step, loss: bwd.loss });
        }
        losses.push(bwd.loss);

        if cfg.grad_clip > 0.0 {
            let norm = bwd.grads.iter().map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                bwd.grads.iter_mut().for_each(|g| g.scale_in_place(s));
            }
        }

        let lr = cfg.lr_at(step);
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (i, g) in bwd.grads.iter().enumerate() {
            let p = model.tensors[i].value.as_mut_slice();
            let g = g.as_slice();
            let wd = if decays[i] { cfg.weight_decay } else { 0.0 };
            match cfg.optimizer {
                OptimizerKind::Adamw => {
                    let (m, v) = (m1[i].as_mut_slice(), m2[i].as_mut_slice());
                    for k in 0..p.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                        p[k] -= lr * (update + wd * p[k]);
                    }
                }
                OptimizerKind::Sgd => {
                    let m = m1[i].as_mut_slice();
                    for k in 0..p.len() {
                        m[k] = 0.9 * m[k] + g[k] + wd * p[k];
                        p[k] -= lr * m[k];
                    }
                }
            }
        }
        progress(step, bwd.loss);
    }

    model.train_meta.steps += cfg.steps;
    model.train_meta.seed = cfg.seed;
    model.train_meta.weight_decay = cfg.weight_decay;
    model.train_meta.learning_rate = cfg.learning_rate;
    model.train_meta.optimizer = Some(match cfg.optimizer {
        OptimizerKind::Adamw => "adamw".into(),
        OptimizerKind::Sgd => "sgd".into(),
    });
    model.train_meta.final_loss = losses.last().copied();
    Ok(TrainOutcome { checkpoint: model, losses })
}

/// Mean per-target cross-entropy over a whole dataset.
pub fn evaluate_loss(model: &ModelCheckpoint, data: &Dataset, batch_size: usize) -> Result<f64, NnError> {
    let mut total = 0.0;
    let mut count = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (loss, n) = data.with_batch(chunk, |b| batch_loss(model, b))?;
        total += loss;
        count += n;
    }
    if count == 0 {
        return Err(NnError::Config("dataset has no labeled positions".into()));
    }
    Ok(total / count as f64)
}
