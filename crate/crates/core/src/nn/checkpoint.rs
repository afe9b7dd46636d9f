use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::arch::ArchSpec;
use super::NnError;
use crate::container;
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    /// Free-form provenance, e.g. which edit produced this checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Architecture, ordered named parameter tensors and training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub arch: ArchSpec,
    pub tensors: Vec<NamedTensor>,
    pub train_meta: TrainMeta,
}

impl ModelCheckpoint {
    /// Random initialization. Projection weights are scaled by fan-in;
    /// residual output projections are shrunk by `1/sqrt(2·layers)`.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut r = rng::stream(seed, "init");
        let depth_scale = 1.0 / (2.0 * arch.n_layers() as f64).sqrt();
        let tensors = arch
            .tensor_shapes()
            .into_iter()
            .map(|(name, rows, cols)| {
                let value = if name.ends_with("norm") {
                    Matrix::from_fn(rows, cols, |_, _| 1.0)
                } else {
                    let std = match name.as_str() {
                        "tok_emb" | "pos_emb" => 0.1,
                        _ if name.ends_with(".o") || name.ends_with(".down") => depth_scale / (cols as f64).sqrt(),
                        _ => 1.0 / (cols as f64).sqrt(),
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut r))
                };
                NamedTensor { name, value }
            })
            .collect();
        Ok(Self { arch, tensors, train_meta: TrainMeta { seed, ..TrainMeta::default() } })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros(arch: ArchSpec) -> Result<Self, NnError> {
        arch.validate()?;
        let tensors = arch
            .tensor_shapes()
            .into_iter()
            .map(|(name, rows, cols)| NamedTensor { name, value: Matrix::zeros(rows, cols) })
            .collect();
        Ok(Self { arch, tensors, train_meta: TrainMeta::default() })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Matrix, NnError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.value)
            .ok_or_else(|| NnError::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix, NnError> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .map(|t| &mut t.value)
            .ok_or_else(|| NnError::MissingTensor(name.to_string()))
    }

    /// Replaces a tensor, keeping its position and checking the shape.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<(), NnError> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "{name}: replacement is {}x{}, expected {}x{}",
                value.rows(),
                value.cols(),
                slot.rows(),
                slot.cols()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Checks that tensor names, order and shapes agree with the architecture.
    pub fn validate(&self) -> Result<(), NnError> {
        self.arch.validate()?;
        let expected = self.arch.tensor_shapes();
        if expected.len() != self.tensors.len() {
            return Err(NnError::Shape(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, rows, cols), t) in expected.iter().zip(&self.tensors) {
            if &t.name != name || t.value.shape() != (*rows, *cols) {
                return Err(NnError::Shape(format!(
                    "tensor {} ({}x{}) does not match expected {name} ({rows}x{cols})",
                    t.name,
                    t.value.rows(),
                    t.value.cols()
                )));
            }
            if !t.value.is_finite() {
                return Err(NnError::NonFinite(t.name.clone()));
            }
        }
        Ok(())
    }

    /// Rounds every parameter to `f32`, matching what a save/load round trip produces.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.value.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut meta = Map::new();
        meta.insert("format".into(), Value::from("curvedit-checkpoint"));
        meta.insert("arch".into(), serde_json::to_value(&self.arch).expect("arch serializes"));
        meta.insert("train_meta".into(), serde_json::to_value(&self.train_meta).expect("meta serializes"));
        let tensors: Vec<(&str, &Matrix)> = self.tensors.iter().map(|t| (t.name.as_str(), &t.value)).collect();
        container::write_file(path, &meta, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let c = container::read_file(path)?;
        let arch: ArchSpec = c
            .meta
            .get("arch")
            .cloned()
            .ok_or_else(|| NnError::Checkpoint("header has no arch".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| NnError::Checkpoint(e.to_string())))?;
        let train_meta: TrainMeta = match c.meta.get("train_meta") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| NnError::Checkpoint(e.to_string()))?,
            None => TrainMeta::default(),
        };
        let tensors = c.tensors.into_iter().map(|(name, value)| NamedTensor { name, value }).collect();
        let ckpt = Self { arch, tensors, train_meta };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{ClassifierArch, LmArch};

    fn small_lm() -> ArchSpec {
        ArchSpec::Lm(LmArch { vocab: 7, context: 5, n_layers: 2, d_model: 4, n_heads: 2, d_mlp: 6 })
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelCheckpoint::init(small_lm(), 3).unwrap();
        let b = ModelCheckpoint::init(small_lm(), 3).unwrap();
        let c = ModelCheckpoint::init(small_lm(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
        assert_eq!(a.num_params(), small_lm().num_params());
    }

    #[test]
    fn projections_addressable_by_name() {
        let a = ModelCheckpoint::init(small_lm(), 0).unwrap();
        for name in a.arch.projection_names() {
            assert!(a.get(&name).is_ok(), "{name}");
        }
        assert_eq!(a.get("layer1.gate").unwrap().shape(), (6, 4));
        assert_eq!(a.get("layer1.down").unwrap().shape(), (4, 6));
    }

    #[test]
    fn save_load_round_trip() {
        let mut a = ModelCheckpoint::init(ArchSpec::Classifier(ClassifierArch::default()), 1).unwrap();
        a.train_meta.steps = 12;
        let path = std::env::temp_dir().join(format!("curvedit-ckpt-{}.bin", std::process::id()));
        a.save(&path).unwrap();
        let b = ModelCheckpoint::load(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        a.round_to_f32();
        assert_eq!(a, b);
    }

    #[test]
    fn set_checks_shape() {
        let mut a = ModelCheckpoint::init(small_lm(), 0).unwrap();
        assert!(a.set("layer0.up", Matrix::zeros(6, 4)).is_ok());
        assert!(a.set("layer0.up", Matrix::zeros(4, 6)).is_err());
        assert!(a.set("nope", Matrix::zeros(1, 1)).is_err());
    }
}
