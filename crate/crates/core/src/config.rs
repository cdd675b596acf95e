//! TOML run configuration shared by all commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::TemplateRegistry;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{ModelConfig, DEFAULT_LAYER_NORM_EPS};
use crate::pma::PmaConfig;
use crate::trainer::{AdamWConfig, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dim: usize,
    pub pma_heads: usize,
    /// Width of the learnable query; defaults to `d_llm`.
    pub d_q: Option<usize>,
    pub scaled_pma_attention: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk();
        Self {
            vocab_size: m.backbone.vocab_size,
            d_llm: m.backbone.d_llm,
            n_layers: m.backbone.n_layers,
            n_heads: m.backbone.n_heads,
            max_len: m.backbone.max_len,
            dim: m.pma.dim,
            pma_heads: m.pma.n_heads,
            d_q: None,
            scaled_pma_attention: false,
            lora_rank: m.lora.rank,
            lora_alpha: m.lora.alpha,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                vocab_size: self.vocab_size,
                d_llm: self.d_llm,
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                max_len: self.max_len,
            },
            pma: PmaConfig {
                dim: self.dim,
                n_heads: self.pma_heads,
                d_q: self.d_q.unwrap_or(self.d_llm),
                scaled_attention: self.scaled_pma_attention,
            },
            lora: LoraConfig {
                rank: self.lora_rank,
                alpha: self.lora_alpha,
            },
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

fn d_learning_rate() -> f64 {
    RunConfig::default().learning_rate
}
fn d_epochs() -> usize {
    RunConfig::default().epochs
}
fn d_batch_size() -> usize {
    RunConfig::default().batch_size
}
fn d_tau() -> f64 {
    RunConfig::default().tau
}
fn d_k_hard() -> usize {
    RunConfig::default().k_hard
}
fn d_one() -> usize {
    1
}
fn d_warmup() -> f64 {
    RunConfig::default().warmup_fraction
}
fn d_checkpoints() -> usize {
    RunConfig::default().checkpoints
}
fn d_output_dir() -> PathBuf {
    PathBuf::from("run")
}

/// `code_edit_weight` has no default here on purpose: every config file
/// must state it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    /// Token cap per sequence; defaults to the model's `max_len`.
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_k_hard")]
    pub k_hard: usize,
    #[serde(default = "d_one")]
    pub world_size: usize,
    #[serde(default)]
    pub loss_weights: BTreeMap<String, f64>,
    pub code_edit_weight: f64,
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub drop_last: bool,
    #[serde(default = "d_checkpoints")]
    pub checkpoints: usize,
    /// When set, one weight per checkpoint; a merged checkpoint is written.
    #[serde(default)]
    pub merge_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    /// Extra templates merged over the built-in registry.
    pub templates: Option<PathBuf>,
    pub use_templates: Option<bool>,
}

fn d_k() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub tasks: Vec<PathBuf>,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            k: d_k(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl CliConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train.output_dir);
        self.data.train.iter_mut().for_each(fix);
        self.data.templates.iter_mut().for_each(fix);
        self.eval.tasks.iter_mut().for_each(fix);
        self.eval.checkpoint.iter_mut().for_each(fix);
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_model_config()
    }

    pub fn run_config(&self) -> RunConfig {
        let t = &self.train;
        RunConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            max_len: t.max_len.unwrap_or(self.model.max_len),
            tau: t.tau,
            k_hard: t.k_hard,
            world_size: t.world_size,
            loss_weights: t.loss_weights.clone(),
            code_edit_weight: t.code_edit_weight,
            seed: self.seed,
            warmup_fraction: t.warmup_fraction,
            drop_last: t.drop_last,
            checkpoints: t.checkpoints,
            optimizer: t.optimizer,
        }
    }

    /// Checks every field; performs no I/O.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.run_config().validate()?;
        if let Some(w) = &self.train.merge_weights {
            if w.len() != self.train.checkpoints {
                return Err(Error::config(
                    "train.merge_weights",
                    format!("has {} entries for {} checkpoints", w.len(), self.train.checkpoints),
                ));
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config("train.merge_weights", "must be non-negative with a positive sum"));
            }
        }
        if self.eval.k == 0 {
            return Err(Error::config("eval.k", "must be at least 1"));
        }
        Ok(())
    }

    pub fn use_templates(&self) -> bool {
        self.data.use_templates.unwrap_or(true)
    }

    /// Built-in templates plus the configured extra file, or `None` when
    /// templates are disabled.
    pub fn templates(&self) -> Result<Option<TemplateRegistry>> {
        if !self.use_templates() {
            return Ok(None);
        }
        let mut reg = TemplateRegistry::builtin();
        if let Some(p) = &self.data.templates {
            reg.extend(TemplateRegistry::load(p)?);
        }
        Ok(Some(reg))
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
