//! Run configuration: one JSON document describing every stage.

use std::path::{Path, PathBuf};

use curvedit::datagen::{ClassifierSetSpec, LmCorpusSpec};
use curvedit::editing::{BsnParams, EditMethod, EditPlan};
use curvedit::kfac::CollectConfig;
use curvedit::nn::{ArchSpec, ClassifierArch, LmArch, TrainConfig};
use curvedit::spectral::BandSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lm,
    Classifier,
}

/// Artifact locations. Relative entries are resolved against `workdir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub factors: PathBuf,
    pub edits: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            workdir: None,
            corpus: "data".into(),
            checkpoint: "model/baseline.ckpt".into(),
            factors: "factors".into(),
            edits: "edits".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfacStage {
    /// Projections to collect factors for; empty means every MLP projection.
    pub targets: Vec<String>,
    pub collect: CollectConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandsStage {
    pub layers: Vec<String>,
    pub spec: BandSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedEdit {
    /// Label of the edited model in every artifact name and report.
    pub name: String,
    pub plan: EditPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub ndcg_k: usize,
    pub stress_max_shift: usize,
    pub stress_draws: usize,
    pub batch_size: usize,
    /// Size of the retain set handed to the mask edit.
    pub retain_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ndcg_k: 10, stress_max_shift: 16, stress_draws: 32, batch_size: 32, retain_size: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepStage {
    pub rhos: Vec<f64>,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Added to the seed of every stage component.
    pub seed: u64,
    pub task: Task,
    pub paths: Paths,
    pub lm_data: LmCorpusSpec,
    pub classifier_data: ClassifierSetSpec,
    pub lm_arch: LmArch,
    pub classifier_arch: ClassifierArch,
    pub train: TrainConfig,
    pub kfac: KfacStage,
    pub bands: BandsStage,
    pub edits: Vec<NamedEdit>,
    pub eval: EvalOptions,
    pub sweep: SweepStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::lm()
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl RunConfig {
    /// Memorization-trained language model; edits the last block's gate/up.
    pub fn lm() -> Self {
        let edited = names(&["layer3.gate", "layer3.up"]);
        let all_mlp: Vec<String> =
            (0..4).flat_map(|l| ["gate", "up", "down"].map(|p| format!("layer{l}.{p}"))).collect();
        Self {
            seed: 0,
            task: Task::Lm,
            paths: Paths::default(),
            lm_data: LmCorpusSpec::default(),
            classifier_data: ClassifierSetSpec::default(),
            lm_arch: LmArch::default(),
            classifier_arch: ClassifierArch::default(),
            train: TrainConfig { steps: 2000, batch_size: 16, learning_rate: 3e-3, seed: 1, ..TrainConfig::default() },
            kfac: KfacStage { targets: Vec::new(), collect: CollectConfig::default() },
            bands: BandsStage { layers: all_mlp.clone(), spec: BandSpec::default() },
            edits: vec![
                NamedEdit { name: "kfac".into(), plan: EditPlan { method: EditMethod::KfacPairs { rho: 0.6 }, targets: edited.clone() } },
                NamedEdit {
                    name: "svd".into(),
                    plan: EditPlan { method: EditMethod::SvdTruncate { keep_fraction: 0.3 }, targets: edited.clone() },
                },
                NamedEdit { name: "bsn".into(), plan: EditPlan { method: EditMethod::BsnMask(BsnParams::default()), targets: all_mlp } },
            ],
            eval: EvalOptions::default(),
            sweep: SweepStage { rhos: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0], targets: edited },
        }
    }

    /// Noisy-label residual MLP; edits the up/down projections of both blocks.
    pub fn classifier() -> Self {
        let edited = names(&["layer0.up", "layer0.down", "layer1.up", "layer1.down"]);
        Self {
            task: Task::Classifier,
            train: TrainConfig { steps: 3000, batch_size: 64, learning_rate: 3e-3, weight_decay: 0.3, seed: 1, ..TrainConfig::default() },
            bands: BandsStage { layers: edited.clone(), spec: BandSpec::default() },
            edits: vec![
                NamedEdit { name: "kfac".into(), plan: EditPlan { method: EditMethod::KfacPairs { rho: 0.75 }, targets: edited.clone() } },
                NamedEdit {
                    name: "svd".into(),
                    plan: EditPlan { method: EditMethod::SvdTruncate { keep_fraction: 0.3 }, targets: edited.clone() },
                },
                NamedEdit {
                    name: "bsn".into(),
                    plan: EditPlan { method: EditMethod::BsnMask(BsnParams::default()), targets: edited.clone() },
                },
            ],
            sweep: SweepStage { rhos: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0], targets: edited },
            ..Self::lm()
        }
    }

    pub fn preset(task: Task) -> Self {
        match task {
            Task::Lm => Self::lm(),
            Task::Classifier => Self::classifier(),
        }
    }

    pub fn arch(&self) -> ArchSpec {
        match self.task {
            Task::Lm => ArchSpec::Lm(self.lm_arch.clone()),
            Task::Classifier => ArchSpec::Classifier(self.classifier_arch.clone()),
        }
    }

    /// Component seed shifted by the global seed.
    pub fn seed_for(&self, component: u64) -> u64 {
        component.wrapping_add(self.seed)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Applies `key.path=value` overrides. The value is parsed as JSON and
    /// falls back to a plain string; the path must already exist.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for ov in overrides {
            let (key, raw) = ov.split_once('=').ok_or_else(|| CliError::Config(format!("override {ov:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| CliError::Config(format!("after overrides: {e}")))
    }

    /// SHA-256 of the serialized config with the workdir removed, so a run
    /// hashes the same wherever it lives.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.workdir = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        match self.task {
            Task::Lm => {
                self.lm_data.validate().map_err(|e| cfg(e.to_string()))?;
                ArchSpec::Lm(self.lm_arch.clone()).validate().map_err(|e| cfg(e.to_string()))?;
            }
            Task::Classifier => {
                self.classifier_data.validate().map_err(|e| cfg(e.to_string()))?;
                ArchSpec::Classifier(self.classifier_arch.clone()).validate().map_err(|e| cfg(e.to_string()))?;
            }
        }
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.bands.spec.validate().map_err(|e| cfg(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.edits {
            if e.name.is_empty() || e.name == "baseline" || !e.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(cfg(format!("edit name {:?} must be a non-empty [A-Za-z0-9_-] word other than \"baseline\"", e.name)));
            }
            if !seen.insert(&e.name) {
                return Err(cfg(format!("duplicate edit name {:?}", e.name)));
            }
            e.plan.validate().map_err(|err| cfg(format!("edit {}: {err}", e.name)))?;
        }
        for &rho in &self.sweep.rhos {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(cfg(format!("sweep rho {rho} outside (0, 1]")));
            }
        }
        if self.eval.stress_draws == 0 || self.eval.batch_size == 0 || self.eval.ndcg_k == 0 {
            return Err(cfg("eval draws, batch size and k must be positive".into()));
        }
        Ok(())
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let last = n + 1 == parts.len();
        let next = match cur {
            Value::Object(map) => {
                if last && !map.contains_key(*part) && key == "paths.workdir" {
                    map.insert(part.to_string(), Value::Null);
                }
                map.get_mut(*part)
            }
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        };
        cur = next.ok_or_else(|| CliError::Config(format!("override key {key:?} does not name a config field")))?;
    }
    *cur = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_losslessly() {
        for c in [RunConfig::lm(), RunConfig::classifier()] {
            let back = RunConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_json(), c.to_json());
            c.validate().unwrap();
        }
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let c = RunConfig::lm()
            .with_overrides(&["train.steps=7".into(), "edits.0.plan.rho=0.9".into(), "paths.reports=out".into()])
            .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.edits[0].plan.method, EditMethod::KfacPairs { rho: 0.9 });
        assert_eq!(c.paths.reports, PathBuf::from("out"));
        let w = RunConfig::lm().with_overrides(&["paths.workdir=/tmp/x".into()]).unwrap();
        assert_eq!(w.paths.workdir, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for ov in ["train.stepz=1", "train.steps=abc", "noequals", "edits.9.name=x"] {
            let err = RunConfig::lm().with_overrides(&[ov.into()]).unwrap_err();
            assert_eq!(err.exit_code(), 3, "{ov}");
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::lm()).unwrap();
        v["extra"] = Value::from(1);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn hash_ignores_workdir_only() {
        let a = RunConfig::lm();
        let mut b = a.clone();
        b.paths.workdir = Some("/somewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.train.steps += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_rejects_bad_names_and_rhos() {
        let mut c = RunConfig::lm();
        c.edits[1].name = "kfac".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::lm();
        c.sweep.rhos.push(1.5);
        assert!(c.validate().is_err());
    }
}
