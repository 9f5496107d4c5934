//! Run configuration documents and manifests.
//!
//! One JSON document drives a whole training run. Every section has full
//! defaults, so a config file only states what it changes; unknown fields
//! are rejected rather than silently ignored. The SHA-256 hash of the
//! canonical serialization identifies a config in manifests and reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adv::AdvConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::ConsistencyConfig;
use crate::synth::GeneratorConfig;
use crate::trainer::{Method, MixtureConfig, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Where checkpoints, metrics and reports land.
    pub out_dir: PathBuf,
    /// Pre-generated dataset directory; when absent, datasets are built in
    /// memory from the generator section.
    pub data_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out_dir: PathBuf::from("runs"), data_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub mixture: MixtureConfig,
    pub adversarial: AdvConfig,
    pub consistency: ConsistencyConfig,
    pub method: Method,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Clean training samples per task family when self-generating.
    pub train_size: usize,
    /// Clean evaluation samples per task family.
    pub test_size: usize,
    pub paths: PathsConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            model: ModelConfig::default(),
            generator: GeneratorConfig::default(),
            mixture: MixtureConfig::default(),
            adversarial: AdvConfig::default(),
            consistency: ConsistencyConfig::default(),
            method: Method::Ours,
            optimizer: OptimizerConfig::default(),
            epochs: 1,
            seed: 0,
            train_size: 2000,
            test_size: 500,
            paths: PathsConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.generator.validate()?;
        self.mixture.validate()?;
        self.adversarial.validate()?;
        self.consistency.validate()?;
        self.optimizer.validate()?;
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("train_size and test_size must be positive".into()));
        }
        if self.generator.d_feat != self.model.d_feat {
            return Err(Error::Config(format!(
                "generator d_feat {} does not match model d_feat {}",
                self.generator.d_feat, self.model.d_feat
            )));
        }
        if self.generator.max_text_tokens > self.model.max_text_tokens {
            return Err(Error::Config(format!(
                "generator text cap {} exceeds the model's {}",
                self.generator.max_text_tokens, self.model.max_text_tokens
            )));
        }
        if self.generator.vocab.tokens_required() > self.model.vocab_size {
            return Err(Error::Config(format!(
                "vocab layout needs {} tokens, model has {}",
                self.generator.vocab.tokens_required(),
                self.model.vocab_size
            )));
        }
        if self.generator.n_classes != self.model.n_options {
            return Err(Error::Config(format!(
                "generator has {} classes, model decodes {} options",
                self.generator.n_classes, self.model.n_options
            )));
        }
        Ok(())
    }

    /// Parses and validates a document.
    pub fn from_json(text: &str) -> Result<TrainingConfig> {
        let cfg: TrainingConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainingConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        TrainingConfig::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical (field-ordered, compact) serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything needed to replay one CLI invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub command: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub tool_version: String,
    pub unix_time: u64,
}

impl RunManifest {
    pub fn new(run_id: String, config_hash: String, command: String, seed: u64) -> RunManifest {
        let unix_time = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            run_id,
            config_hash,
            command,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            unix_time,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        TrainingConfig::default().validate().unwrap();
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = TrainingConfig::default();
        let b = TrainingConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = TrainingConfig { seed: 1, ..TrainingConfig::default() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = TrainingConfig { seed: 7, epochs: 2, ..TrainingConfig::default() };
        cfg.save(&path).unwrap();
        let back = TrainingConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"sede": 7}"#).unwrap();
        let err = TrainingConfig::load(&path).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("sede")));
    }

    #[test]
    fn partial_documents_fill_from_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"method": "Vanilla", "seed": 3}"#).unwrap();
        let cfg = TrainingConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.train_size, 2000);
    }

    #[test]
    fn cross_section_mismatches_are_caught() {
        let mut cfg = TrainingConfig::default();
        cfg.model.d_feat = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("d_feat")));

        let mut cfg = TrainingConfig::default();
        cfg.model.vocab_size = 48;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainingConfig::default();
        cfg.model.n_options = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut m = RunManifest::new("run-1".into(), "abc".into(), "train".into(), 0);
        m.outputs.push("model.bin".into());
        m.write(&path).unwrap();
        let back: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(m, back);
    }
}
