//! The full embedding model: backbone, adapters and pooling head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneVars, INIT_BOUND};
use crate::error::Result;
use crate::lora::{self, LoraConfig};
use crate::params::{Binding, ParamStore};
use crate::pma::{Embedding, PmaConfig, PmaParams, PmaTrace, PmaVars};
use crate::tensor::{Tape, Var};

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub pma: PmaConfig,
    pub lora: LoraConfig,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        let backbone = BackboneConfig::desk();
        Self {
            backbone,
            pma: PmaConfig::desk(backbone.d_llm),
            lora: LoraConfig::desk(),
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pma.validate()?;
        self.lora.validate()?;
        if !(self.layer_norm_eps >= 0.0) {
            return Err(crate::Error::config("model.layer_norm_eps", "must be non-negative"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Parameters that receive gradients during fine-tuning: adapters and the
/// whole pooling head. The base backbone stays frozen.
pub fn is_trainable(name: &str) -> bool {
    lora::is_adapter_param(name) || name.starts_with("pma.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Seeded initialization of every parameter.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&mut params, &config.backbone, &mut rng);
        PmaParams::init(config.backbone.d_llm, &config.pma, config.layer_norm_eps, &mut rng).write_to(&mut params);
        lora::init_adapters(&mut params, &config.backbone, config.lora, INIT_BOUND, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn dim(&self) -> usize {
        self.config.pma.dim
    }

    pub fn pma_params(&self) -> Result<PmaParams> {
        PmaParams::read_from(&self.params, &self.config.pma, self.config.layer_norm_eps)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Result<ModelVars> {
        let binding = self.params.bind(tape, trainable);
        ModelVars::new(binding, &self.config)
    }

    /// Encodes and pools one sequence; optionally L2-normalizes the result.
    pub fn embed(&self, tokens: &[usize], token_mask: &[bool], normalize: bool) -> Result<Embedding> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false)?;
        let e = vars.embed(&mut tape, tokens, token_mask)?;
        let emb = Embedding {
            values: tape.value(e).clone(),
            normalized: false,
        };
        if normalize {
            emb.l2_normalized()
        } else {
            Ok(emb)
        }
    }

    /// Embeds unpadded token sequences in parallel; output order matches input.
    pub fn embed_many(&self, sequences: &[Vec<usize>], normalize: bool) -> Result<Vec<Embedding>> {
        sequences
            .par_iter()
            .map(|seq| self.embed(seq, &vec![true; seq.len()], normalize))
            .collect()
    }
}

/// A model bound to one tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub binding: Binding,
    pub backbone: BackboneVars,
    pub pma: PmaVars,
}

impl ModelVars {
    pub fn new(binding: Binding, config: &ModelConfig) -> Result<Self> {
        let backbone = BackboneVars::bind(&binding, &config.backbone, config.layer_norm_eps, config.lora.scale())?;
        let pma = PmaVars::bind(&binding, &config.pma, config.layer_norm_eps)?;
        Ok(Self { binding, backbone, pma })
    }

    pub fn embed_traced(&self, tape: &mut Tape, tokens: &[usize], token_mask: &[bool]) -> Result<PmaTrace> {
        let h = self.backbone.encode(tape, tokens, token_mask)?;
        self.pma.pool(tape, h, token_mask)
    }

    /// `1 × d` embedding of one sequence.
    pub fn embed(&self, tape: &mut Tape, tokens: &[usize], token_mask: &[bool]) -> Result<Var> {
        Ok(self.embed_traced(tape, tokens, token_mask)?.embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                vocab_size: 260,
                d_llm: 16,
                n_layers: 1,
                n_heads: 2,
                max_len: 128,
            },
            pma: PmaConfig::desk(16),
            lora: LoraConfig::desk(),
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
        }
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(Model::init(small(), 3).unwrap(), Model::init(small(), 3).unwrap());
        assert_ne!(Model::init(small(), 3).unwrap(), Model::init(small(), 4).unwrap());
    }

    #[test]
    fn embed_width_and_norm() {
        let model = Model::init(small(), 1).unwrap();
        for l in [1, 7, 128] {
            let tokens: Vec<usize> = (0..l).map(|i| i % 256).collect();
            let e = model.embed(&tokens, &vec![true; l], true).unwrap();
            assert_eq!(e.values.shape(), &[1, 32]);
            assert!((e.values.l2_norm() - 1.0).abs() < 1e-9);
            assert!(e.normalized);
        }
    }

    #[test]
    fn trainable_split() {
        assert!(is_trainable("pma.w_k"));
        assert!(is_trainable("lora.backbone.blocks.0.attn.wq.a"));
        assert!(!is_trainable("backbone.blocks.0.attn.wq"));
        assert!(!is_trainable("backbone.tok_emb"));
    }
}
