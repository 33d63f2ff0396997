//! Experiment configuration: a strict TOML document whose canonical
//! re-serialization is hashed into a fingerprint stamped on every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BatchShape, BenchmarkConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::EmbedderConfig;
use crate::quality::{AttentionConfig, FusionMode};
use crate::train::{CeMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EmbedderConfig::default();
        Self {
            hidden_dims: e.hidden_dims,
            embed_dim: e.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_decay: f64,
    pub iterations: u64,
    pub ce_mode: CeMode,
    pub fusion_mode: FusionMode,
    pub batch: BatchShape,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            lr_decay: 0.0,
            iterations: 2000,
            ce_mode: CeMode::FlaWeighted,
            fusion_mode: FusionMode::Ffa,
            batch: BatchShape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Seeds used by ablation and sweep runs: `seed, seed + 1, ...`.
    pub num_seeds: u64,
    /// Write per-item confidences and attention weights during training.
    #[serde(default)]
    pub attention_log: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            num_seeds: 5,
            attention_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub benchmark: BenchmarkConfig,
    pub model: ModelSection,
    pub attention: AttentionConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML: fixed key order, every field spelled out.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("experiment config always serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.embedder().validate()?;
        self.train_config().validate()?;
        if self.eval.num_seeds == 0 {
            return Err(Error::Config("eval.num_seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn embedder(&self) -> EmbedderConfig {
        EmbedderConfig {
            input_dim: self.benchmark.input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            embed_dim: self.model.embed_dim,
            num_identities: self.benchmark.train_identities,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            lr_decay: self.train.lr_decay,
            iterations: self.train.iterations,
            ce_mode: self.train.ce_mode,
            fusion_mode: self.train.fusion_mode,
            attention: self.attention,
            loss: self.loss,
            batch: self.train.batch,
            seed: self.seed,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.eval.num_seeds).map(|i| self.seed + i).collect()
    }
}
