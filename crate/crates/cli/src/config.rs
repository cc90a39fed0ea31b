//! Experiment configuration files.
//!
//! ```json
//! {
//!   "data": { "synth": { "classes": 50, "attr_dim": 12, "input_dim": 32, "per_class": 100, "sigma": 0.7 },
//!             "seed": 0, "test_fraction": 0.2 },
//!   "model": { "hidden": [64, 64], "embedding_dim": 16 },
//!   "loss": { "kind": "atam" },
//!   "train": { "epochs": 50 },
//!   "eval": { "far_levels": [0.01, 0.001] },
//!   "seed": 0,
//!   "output_dir": "runs/atam"
//! }
//! ```
//!
//! Unknown keys are rejected everywhere. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use atamlab_core::data::{load_csv_dataset, split_train_test, synth_generate, Dataset, SynthConfig};
use atamlab_core::eval::EvalConfig;
use atamlab_core::train::{defaults, TrainConfig};
use atamlab_core::{LossKind, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub attr_dim: usize,
    pub input_dim: usize,
    pub per_class: usize,
    #[serde(default)]
    pub long_tail_exponent: Option<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    pub features: PathBuf,
    #[serde(default)]
    pub attributes: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSection>,
    /// Seeds synthetic generation and the train/test split.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Optimizer settings; the loss and seed live at the top level of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "defaults::decay_interval")]
    pub decay_interval: usize,
    #[serde(default = "defaults::lr_floor")]
    pub lr_floor: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            lr_decay: defaults::lr_decay(),
            decay_interval: defaults::decay_interval(),
            lr_floor: defaults::lr_floor(),
            momentum: defaults::momentum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    pub loss: LossKind,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Seeds model initialization and batch order.
    #[serde(default)]
    pub seed: u64,
    /// Seeds for multi-seed comparisons; `seed` is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A validated config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::validation(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: atamlab_core::Error| CliError::validation(e.to_string());
        match (&self.data.synth, &self.data.csv) {
            (Some(s), None) => self.synth_config(s).validate().map_err(v)?,
            (None, Some(_)) => {}
            _ => return Err(CliError::validation("invalid config: data needs exactly one of `synth` or `csv`")),
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(CliError::validation("invalid config: test_fraction must lie in (0, 1)"));
        }
        self.model.validate().map_err(v)?;
        self.loss.validate().map_err(v)?;
        self.train_config(self.seed).validate().map_err(v)?;
        self.eval.validate().map_err(v)?;
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(CliError::validation("invalid config: seeds must not be empty"));
        }
        Ok(())
    }

    pub fn synth_config(&self, s: &SynthSection) -> SynthConfig {
        SynthConfig {
            classes: s.classes,
            attr_dim: s.attr_dim,
            input_dim: s.input_dim,
            per_class: s.per_class,
            long_tail_exponent: s.long_tail_exponent,
            sigma: s.sigma,
            seed: self.data.seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            loss: self.loss,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            decay_interval: t.decay_interval,
            lr_floor: t.lr_floor,
            momentum: t.momentum,
            seed,
        }
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        let config = ExperimentConfig::parse(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let hash = config.hash();
        Ok(LoadedConfig { config, base_dir, hash })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self, overridden: Option<&Path>) -> PathBuf {
        match overridden {
            Some(dir) => dir.to_path_buf(),
            None => self.resolve(&self.config.output_dir),
        }
    }

    /// The full dataset described by the data section.
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let cfg = &self.config;
        if let Some(s) = &cfg.data.synth {
            return synth_generate(&cfg.synth_config(s)).map_err(CliError::from_core);
        }
        let csv = cfg.data.csv.as_ref().expect("validated data section");
        let attributes = csv.attributes.as_ref().map(|p| self.resolve(p));
        if cfg.loss.uses_margins() {
            match &attributes {
                None => return Err(CliError::validation("ATAM requires attributes: no attribute file configured")),
                Some(p) if !p.exists() => {
                    return Err(CliError::validation(format!(
                        "ATAM requires attributes: {} not found",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        load_csv_dataset(self.resolve(&csv.features), attributes.as_deref()).map_err(CliError::from_core)
    }

    pub fn split(&self) -> Result<(Dataset, Dataset), CliError> {
        let ds = self.dataset()?;
        split_train_test(&ds, self.config.data.test_fraction, self.config.data.seed).map_err(CliError::from_core)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"data": {"synth": {"classes": 4, "attr_dim": 3, "input_dim": 5, "per_class": 6, "sigma": 0.2}},
                              "loss": {"kind": "softmax"}}"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train, TrainSection::default());
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.run_seeds(), vec![0]);
        assert_eq!(cfg.data.test_fraction, 0.2);
    }

    #[test]
    fn unknown_keys_rejected() {
        let typo = MINIMAL.replace("\"sigma\"", "\"sigmaa\": 1, \"sigma\"");
        assert!(ExperimentConfig::parse(&typo).is_err());
        let top = MINIMAL.replace("\"loss\"", "\"los\": 1, \"loss\"");
        assert!(ExperimentConfig::parse(&top).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let one_class = MINIMAL.replace("\"classes\": 4", "\"classes\": 1");
        let err = ExperimentConfig::parse(&one_class).unwrap_err();
        assert!(err.to_string().contains("classes"), "{err}");
        let both = MINIMAL.replace("\"data\": {", "\"data\": {\"csv\": {\"features\": \"f.csv\"}, ");
        assert!(ExperimentConfig::parse(&both).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let b = ExperimentConfig::parse(&MINIMAL.replace(' ', "")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = ExperimentConfig::parse(&MINIMAL.replace("0.2", "0.3")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
