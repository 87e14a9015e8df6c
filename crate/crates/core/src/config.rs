//! Run configuration: one TOML document combining the model, trainer, and
//! objective settings with dataset paths and an output directory.
//!
//! Unknown keys are hard errors (no silent typo tolerance), and every run
//! writes the fully-resolved document (defaults expanded) next to its
//! outputs so a run directory is self-describing.

use crate::backbone::{ModelConfig, ModelConfigError};
use crate::objectives::{ObjectiveConfig, ObjectiveError};
use crate::trainer::{TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Multi-frame extended-XYZ training set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// Optional held-out split for evaluation after training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Where checkpoints, metrics, and the resolved config are written.
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("scd-run"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            objective: ObjectiveConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("model: {0}")]
    Model(#[from] ModelConfigError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("objective: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("missing required config key '{key}'")]
    MissingKey { key: &'static str },
    #[error("i/o failure reading config: {0}")]
    Io(#[from] std::io::Error),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Component validation plus cross-field rules (a conditioned objective
    /// demands a condition-enabled model).
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.objective.validate(self.model.condition_enabled)?;
        Ok(())
    }

    /// The fully-resolved document, every default expanded.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The training-set path, required by the training subcommands.
    pub fn train_data(&self) -> Result<&Path, ConfigError> {
        self.data.train.as_deref().ok_or(ConfigError::MissingKey { key: "data.train" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ObjectiveKind;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.embedding_dim, 256);
        assert_eq!(cfg.train.total_steps, 100_000);
        assert_eq!(cfg.objective.kind, ObjectiveKind::Scd);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("learning_rate"), "unhelpful error: {text}");

        let err = RunConfig::from_toml("typo_toplevel = 3\n").unwrap_err();
        assert!(err.to_string().contains("typo_toplevel"));
    }

    #[test]
    fn conditioned_objective_requires_conditioned_model() {
        let doc = "[model]\ncondition_enabled = false\n\n[objective]\nkind = \"scd\"\n";
        let err = RunConfig::from_toml(doc).unwrap_err();
        assert!(matches!(err, ConfigError::Objective(ObjectiveError::ConditionDisabled { .. })));

        let ok = "[model]\ncondition_enabled = false\n\n[objective]\nkind = \"coord\"\n";
        RunConfig::from_toml(ok).unwrap();
    }

    #[test]
    fn component_validation_is_applied() {
        let err = RunConfig::from_toml("[model]\nembedding_dim = 10\nnum_heads = 4\n").unwrap_err();
        assert!(matches!(err, ConfigError::Model(_)));
        let err = RunConfig::from_toml("[train]\nbase_lr = -1.0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Train(_)));
    }

    #[test]
    fn resolved_document_round_trips() {
        let doc = r#"
output_dir = "runs/demo"

[model]
embedding_dim = 32
num_layers = 2
num_heads = 4

[train]
total_steps = 500
warmup_steps = 50
seed = 9

[objective]
kind = "finetune"
target_key = "density"
denoise_weight = 0.25

[data]
train = "data/train.xyz"
eval = "data/eval.xyz"
"#;
        let cfg = RunConfig::from_toml(doc).unwrap();
        let resolved = cfg.resolved_toml();
        let back = RunConfig::from_toml(&resolved).unwrap();
        assert_eq!(cfg, back);
        // The resolved document carries expanded defaults, not just the
        // overridden keys.
        assert!(resolved.contains("batch_size"));
        assert!(resolved.contains("sigma_corr"));
    }

    #[test]
    fn train_data_is_required_but_only_when_asked_for() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert!(matches!(
            cfg.train_data(),
            Err(ConfigError::MissingKey { key: "data.train" })
        ));
        let cfg = RunConfig::from_toml("[data]\ntrain = \"x.xyz\"\n").unwrap();
        assert_eq!(cfg.train_data().unwrap(), Path::new("x.xyz"));
    }
}
