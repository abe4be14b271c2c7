//! The run configuration: every knob of every command in one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use segflow_core::data::scene::SceneSampler;
use segflow_core::metrics::DEFAULT_BOUNDARY_TOLERANCE;
use segflow_core::training::TrainConfig;
use segflow_core::ModelConfig;

use crate::CliError;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Segmentation training data (Images + Annotations).
    pub train: Option<PathBuf>,
    /// Flow training data (Images + Flow); defaults to `train`.
    pub flow: Option<PathBuf>,
    /// Evaluation data.
    pub eval: Option<PathBuf>,
    /// Skip pairs whose annotation or flow file is missing.
    pub skip_missing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub scene: SceneSampler,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            train_sequences: 20,
            val_sequences: 5,
            scene: SceneSampler::default(),
        }
    }
}

/// Switches that remove one ingredient of the method each.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_fusion: bool,
    pub disable_online: bool,
    pub disable_offline: bool,
    /// Single offline round.
    pub disable_iterative: bool,
    pub disable_seg_augmentation: bool,
    pub disable_flow_augmentation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub flip_ensemble: bool,
    /// Fine-tune on each sequence's first mask before predicting it.
    pub online: bool,
    pub boundary_tolerance: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            flip_ensemble: false,
            online: false,
            boundary_tolerance: DEFAULT_BOUNDARY_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub generate: GenerateConfig,
    pub ablation: Ablation,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("segflow-out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            generate: GenerateConfig::default(),
            ablation: Ablation::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Set `key` (dotted path) in a TOML table to `raw`, parsed as a TOML value
/// when possible and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Usage(format!("bad override key {key:?}")))?;
    let mut table = doc;
    for part in parts {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{part} in {key:?} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Read `path` (if any), then apply `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (k, v) = item.split_once('=').ok_or_else(|| CliError::Usage(format!("override {item:?} is not key=value")))?;
            apply_override(&mut doc, k.trim(), v.trim())?;
        }
        doc.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("bad config: {e}")))
    }

    /// Fold the seed and the ablation switches into the model and training
    /// configs, and validate the result.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        if self.ablation.disable_fusion {
            self.model.fusion_enabled = false;
        }
        if self.ablation.disable_iterative {
            self.train.rounds = 1;
        }
        if self.ablation.disable_seg_augmentation {
            self.train.augment.segmentation = false;
        }
        if self.ablation.disable_flow_augmentation {
            self.train.augment.flow = false;
        }
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default().resolve().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_win_and_ablations_fold_in() {
        let c = RunConfig::load(None, &["seed=7".into(), "train.lr_seg=0.5".into(), "ablation.disable_fusion=true".into(), "out=runs/a".into()])
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!((c.seed, c.model.seed, c.train.seed), (7, 7, 7));
        assert_eq!(c.train.lr_seg, 0.5);
        assert!(!c.model.fusion_enabled);
        assert_eq!(c.out, PathBuf::from("runs/a"));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert!(matches!(RunConfig::load(None, &["train.nope=1".into()]), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::load(None, &["novalue".into()]), Err(CliError::Usage(_))));
    }
}
