//! Low-rank adapters for the backbone attention projections.
//!
//! A frozen weight `W: in×out` is augmented with `a: r×in` and `b: out×r`
//! so that `y = x·W + (alpha/r)·(x·aᵀ)·bᵀ`. With `b = 0` the adapted map is
//! exactly the base map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::{self, Tape, Tensor, Var};

pub const NAMESPACE: &str = "lora";

/// Attention projections that carry adapters.
pub const TARGETS: [&str; 4] = ["wq", "wk", "wv", "wo"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    /// r = 64, alpha = 32.
    pub fn full_scale() -> Self {
        Self {
            rank: 64,
            alpha: 32.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("model.lora_rank", "must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("model.lora_alpha", "must be positive"));
        }
        Ok(())
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let rank = a.shape()[0];
        if a.shape().len() != 2 || b.shape().len() != 2 || b.shape()[1] != rank {
            return Err(Error::shape("lora adapter", a.shape(), b.shape()));
        }
        Ok(Self { a, b, rank, alpha })
    }

    /// `a ~ uniform(-bound, bound)`, `b = 0`.
    pub fn init(in_dim: usize, out_dim: usize, config: LoraConfig, bound: f64, rng: &mut impl Rng) -> Self {
        Self {
            a: Tensor::uniform(&[config.rank, in_dim], bound, rng),
            b: Tensor::zeros(&[out_dim, config.rank]),
            rank: config.rank,
            alpha: config.alpha,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `ΔW = (alpha/r)·b·a`, shape `out × in`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(tensor::scale(&tensor::matmul(&self.b, &self.a)?, self.scale()))
    }

    pub fn zero_like(&self) -> Self {
        Self {
            a: Tensor::zeros(self.a.shape()),
            b: Tensor::zeros(self.b.shape()),
            rank: self.rank,
            alpha: self.alpha,
        }
    }

    fn check_base(&self, base_w: &Tensor) -> Result<()> {
        if base_w.shape() != [self.in_dim(), self.out_dim()] {
            return Err(Error::shape(
                "lora base weight",
                base_w.shape(),
                &[self.in_dim(), self.out_dim()],
            ));
        }
        Ok(())
    }
}

/// `x·base_w + (alpha/r)·(x·aᵀ)·bᵀ` for `x: rows×in`.
pub fn lora_forward(x: &Tensor, base_w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check_base(base_w)?;
    let base = tensor::matmul(x, base_w)?;
    let low = tensor::matmul(x, &tensor::transpose(&adapter.a)?)?;
    let up = tensor::matmul(&low, &tensor::transpose(&adapter.b)?)?;
    tensor::add(&base, &tensor::scale(&up, adapter.scale()))
}

/// Folds the adapter into the base weight: `base_w + ΔWᵀ` (in×out layout).
pub fn merge_adapter(base_w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check_base(base_w)?;
    tensor::add(base_w, &tensor::transpose(&adapter.delta()?)?)
}

/// A projection on the tape, optionally carrying an adapter.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedLinear {
    pub weight: Var,
    pub adapter: Option<(Var, Var, f64)>,
}

impl AdaptedLinear {
    pub fn bind(binding: &Binding, base: &str, scale: f64) -> Result<Self> {
        let weight = binding.var(base)?;
        let adapter = match (binding.opt(&adapter_a(base)), binding.opt(&adapter_b(base))) {
            (Some(a), Some(b)) => Some((a, b, scale)),
            (None, None) => None,
            _ => return Err(Error::Contract(format!("incomplete adapter for `{base}`"))),
        };
        Ok(Self { weight, adapter })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let base = tape.matmul(x, self.weight)?;
        let Some((a, b, scale)) = self.adapter else {
            return Ok(base);
        };
        let at = tape.transpose(a)?;
        let bt = tape.transpose(b)?;
        let low = tape.matmul(x, at)?;
        let up = tape.matmul(low, bt)?;
        let up = tape.scale(up, scale);
        tape.add(base, up)
    }
}

/// Name of the adapter factor `a` for base weight `base`.
pub fn adapter_a(base: &str) -> String {
    format!("{NAMESPACE}.{base}.a")
}

pub fn adapter_b(base: &str) -> String {
    format!("{NAMESPACE}.{base}.b")
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("lora.")
}

/// Base weight names that receive adapters.
pub fn target_weights(backbone: &BackboneConfig) -> Vec<String> {
    (0..backbone.n_layers)
        .flat_map(|layer| TARGETS.iter().map(move |w| format!("backbone.blocks.{layer}.attn.{w}")))
        .collect()
}

pub fn init_adapters(
    store: &mut ParamStore,
    backbone: &BackboneConfig,
    config: LoraConfig,
    bound: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    for base in target_weights(backbone) {
        let shape = store.get(&base)?.shape().to_vec();
        let adapter = LoraAdapter::init(shape[0], shape[1], config, bound, rng);
        store.insert(adapter_a(&base), adapter.a);
        store.insert(adapter_b(&base), adapter.b);
    }
    Ok(())
}

pub fn adapter_from_store(store: &ParamStore, base: &str, config: LoraConfig) -> Result<Option<LoraAdapter>> {
    match (store.get(&adapter_a(base)), store.get(&adapter_b(base))) {
        (Ok(a), Ok(b)) => Ok(Some(LoraAdapter::new(a.clone(), b.clone(), config.alpha)?)),
        _ => Ok(None),
    }
}

/// Folds every adapter present in `store` into its base weight and removes
/// the adapter tensors.
pub fn fold_all(store: &mut ParamStore, config: LoraConfig) -> Result<usize> {
    let bases: Vec<String> = store
        .names()
        .filter_map(|n| n.strip_prefix("lora.").and_then(|r| r.strip_suffix(".a")))
        .map(str::to_owned)
        .collect();
    for base in &bases {
        let adapter = adapter_from_store(store, base, config)?
            .ok_or_else(|| Error::Contract(format!("incomplete adapter for `{base}`")))?;
        let merged = merge_adapter(store.get(base)?, &adapter)?;
        store.insert(base.clone(), merged);
        store.remove(&adapter_a(base));
        store.remove(&adapter_b(base));
    }
    Ok(bases.len())
}
