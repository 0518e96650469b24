//! Run configuration: one TOML document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::importance::{ImportanceConfig, ScoreReduction};
use crate::pruning::{PruneTarget, SelectionStrategy};
use crate::recovery::{IterativeConfig, MimicConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synth,
    /// Directory holding the CIFAR-10 binary batches.
    Cifar10,
    /// Directory holding `{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
    Idx,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Keep only the first `n` training / test samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Bundled architecture name, used when `spec` is unset.
    pub name: String,
    /// Path to a network spec in TOML.
    pub spec: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: "vgg8".into(),
            spec: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub target: PruneTarget,
    pub strategy: SelectionStrategy,
    /// Number of crucial (full-width, reconstructed) nodes.
    pub crucial: usize,
    pub reduction: ScoreReduction,
    pub floor: usize,
    /// Fold learned `|β|` into the kept filters when pruning.
    pub fold_beta: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            target: PruneTarget::FlopsFraction(0.5),
            strategy: SelectionStrategy::Beta,
            crucial: 3,
            reduction: ScoreReduction::Mean,
            floor: 1,
            fold_beta: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for weight initialization and plan randomness.
    pub seed: u64,
    pub eval_batch_size: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub importance: ImportanceConfig,
    pub plan: PlanConfig,
    /// Recovery settings; empty `taps` means the plan's crucial set.
    pub recover: MimicConfig,
    pub finetune: TrainConfig,
    pub iterative: IterativeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            eval_batch_size: 256,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            importance: ImportanceConfig::default(),
            plan: PlanConfig::default(),
            recover: MimicConfig {
                epochs: 6,
                batch_size: 64,
                lr: 1e-3,
                lr_step: 4,
                ..MimicConfig::default()
            },
            finetune: TrainConfig {
                epochs: 2,
                lr: 1e-4,
                ..TrainConfig::default()
            },
            iterative: IterativeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("run config", e.to_string()))
    }

    /// The config as JSON, for embedding into artifacts.
    pub fn resolved(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies a dotted `key=value` override, e.g. `plan.crucial=4`. The value
    /// is parsed as TOML, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut cur = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            cur = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[plan]\ncrucal = 3").is_err());
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let c = RunConfig::from_toml("[plan]\ncrucial = 4\ntarget = { kind = \"speedup\", value = 4.4 }").unwrap();
        assert_eq!(c.plan.crucial, 4);
        assert_eq!(c.plan.target, PruneTarget::Speedup(4.4));
        assert_eq!(c.plan.floor, 1);
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("plan.crucial=5").unwrap();
        c.set("recover.function=mse").unwrap();
        c.set("data.synth.noise=0.25").unwrap();
        assert_eq!(c.plan.crucial, 5);
        assert_eq!(c.recover.function, crate::recovery::MimicFunction::Mse);
        assert_eq!(c.data.synth.noise, 0.25);
        assert!(c.set("plan.nonsense=1").is_err());
    }
}
