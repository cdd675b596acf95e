//! Pooling by multihead attention.
//!
//! One learnable query cross-attends over the backbone's hidden states:
//!
//! ```text
//! Q = q·W_q            (1×d)
//! K = H·W_k, V = H·W_v (l×d)
//! O = softmax(Q·Kᵀ)·V  per head, heads concatenated
//! Õ = LN(O + Q)
//! E = LN(ReLU(Õ·W_o) + Õ)
//! ```
//!
//! The embedding width `d` is independent of both the sequence length and
//! the backbone width. Pad rows of `H` are excluded from every head's softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{HiddenStates, INIT_BOUND};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmaConfig {
    /// Output embedding width `d`.
    pub dim: usize,
    pub n_heads: usize,
    /// Width of the learnable query; defaults to the backbone width.
    pub d_q: usize,
    /// Divide attention scores by `sqrt(d / n_heads)`. Off by default.
    #[serde(default)]
    pub scaled_attention: bool,
}

impl PmaConfig {
    pub fn desk(d_llm: usize) -> Self {
        Self {
            dim: 32,
            n_heads: 4,
            d_q: d_llm,
            scaled_attention: false,
        }
    }

    /// 32 heads.
    pub fn full_scale(d_llm: usize, dim: usize) -> Self {
        Self {
            dim,
            n_heads: 32,
            d_q: d_llm,
            scaled_attention: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_heads == 0 || self.d_q == 0 {
            return Err(Error::config("model.pma", "dim, n_heads and d_q must be positive"));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.pma_heads",
                format!("pma dim {} is not divisible by {} heads", self.dim, self.n_heads),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[width]),
            beta: Tensor::zeros(&[width]),
        }
    }
}

/// Weights of the pooling head.
#[derive(Clone, Debug, PartialEq)]
pub struct PmaParams {
    pub q: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub n_heads: usize,
    pub scaled_attention: bool,
    pub eps: f64,
}

const NAMES: [&str; 9] = [
    "pma.q",
    "pma.w_q",
    "pma.w_k",
    "pma.w_v",
    "pma.w_o",
    "pma.ln1.gamma",
    "pma.ln1.beta",
    "pma.ln2.gamma",
    "pma.ln2.beta",
];

impl PmaParams {
    pub fn init(d_llm: usize, config: &PmaConfig, eps: f64, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        Self {
            q: Tensor::uniform(&[1, config.d_q], INIT_BOUND, rng),
            w_q: Tensor::uniform(&[config.d_q, d], INIT_BOUND, rng),
            w_k: Tensor::uniform(&[d_llm, d], INIT_BOUND, rng),
            w_v: Tensor::uniform(&[d_llm, d], INIT_BOUND, rng),
            w_o: Tensor::uniform(&[d, d], INIT_BOUND, rng),
            ln1: LayerNormParams::identity(d),
            ln2: LayerNormParams::identity(d),
            n_heads: config.n_heads,
            scaled_attention: config.scaled_attention,
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let d_q = self.q.cols();
        let d_llm = self.w_k.shape()[0];
        let expect: [(&Tensor, &[usize]); 9] = [
            (&self.q, &[1, d_q]),
            (&self.w_q, &[d_q, d]),
            (&self.w_k, &[d_llm, d]),
            (&self.w_v, &[d_llm, d]),
            (&self.w_o, &[d, d]),
            (&self.ln1.gamma, &[d]),
            (&self.ln1.beta, &[d]),
            (&self.ln2.gamma, &[d]),
            (&self.ln2.beta, &[d]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::shape("pma params", t.shape(), shape));
            }
        }
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Contract(format!("pma dim {d} not divisible by {} heads", self.n_heads)));
        }
        Ok(())
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.q,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln1.gamma,
            &self.ln1.beta,
            &self.ln2.gamma,
            &self.ln2.beta,
        ]
    }

    pub fn write_to(&self, store: &mut ParamStore) {
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            store.insert(*name, t.clone());
        }
    }

    pub fn read_from(store: &ParamStore, config: &PmaConfig, eps: f64) -> Result<Self> {
        let get = |n: &str| store.get(n).cloned();
        let params = Self {
            q: get("pma.q")?,
            w_q: get("pma.w_q")?,
            w_k: get("pma.w_k")?,
            w_v: get("pma.w_v")?,
            w_o: get("pma.w_o")?,
            ln1: LayerNormParams {
                gamma: get("pma.ln1.gamma")?,
                beta: get("pma.ln1.beta")?,
            },
            ln2: LayerNormParams {
                gamma: get("pma.ln2.gamma")?,
                beta: get("pma.ln2.beta")?,
            },
            n_heads: config.n_heads,
            scaled_attention: config.scaled_attention,
            eps,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Pooled sequence embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Tensor,
    pub normalized: bool,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.numel()
    }

    pub fn l2_normalized(&self) -> Result<Self> {
        Ok(Self {
            values: crate::tensor::normalize_rows(&self.values)?,
            normalized: true,
        })
    }
}

/// Pooling head bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct PmaVars {
    q: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln1: (Var, Var),
    ln2: (Var, Var),
    n_heads: usize,
    scaled_attention: bool,
    eps: f64,
}

/// Forward results kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct PmaTrace {
    pub embedding: Var,
    /// `n_heads × l` attention weights, one row per head.
    pub attention: Var,
}

impl PmaVars {
    pub fn bind(binding: &Binding, config: &PmaConfig, eps: f64) -> Result<Self> {
        Ok(Self {
            q: binding.var("pma.q")?,
            w_q: binding.var("pma.w_q")?,
            w_k: binding.var("pma.w_k")?,
            w_v: binding.var("pma.w_v")?,
            w_o: binding.var("pma.w_o")?,
            ln1: (binding.var("pma.ln1.gamma")?, binding.var("pma.ln1.beta")?),
            ln2: (binding.var("pma.ln2.gamma")?, binding.var("pma.ln2.beta")?),
            n_heads: config.n_heads,
            scaled_attention: config.scaled_attention,
            eps,
        })
    }

    /// Leaves for a standalone parameter set (all trainable when `grad`).
    pub fn leaves(tape: &mut Tape, params: &PmaParams, grad: bool) -> Self {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), grad);
        Self {
            q: leaf(&params.q),
            w_q: leaf(&params.w_q),
            w_k: leaf(&params.w_k),
            w_v: leaf(&params.w_v),
            w_o: leaf(&params.w_o),
            ln1: (leaf(&params.ln1.gamma), leaf(&params.ln1.beta)),
            ln2: (leaf(&params.ln2.gamma), leaf(&params.ln2.beta)),
            n_heads: params.n_heads,
            scaled_attention: params.scaled_attention,
            eps: params.eps,
        }
    }

    pub fn all(&self) -> [Var; 9] {
        [
            self.q, self.w_q, self.w_k, self.w_v, self.w_o, self.ln1.0, self.ln1.1, self.ln2.0, self.ln2.1,
        ]
    }

    /// Pools hidden states `h` (`l × d_llm`) into a `1 × d` embedding.
    pub fn pool(&self, tape: &mut Tape, h: Var, token_mask: &[bool]) -> Result<PmaTrace> {
        if tape.value(h).rows() != token_mask.len() {
            return Err(Error::shape("pma_pool", tape.value(h).shape(), &[token_mask.len()]));
        }
        if !token_mask.iter().any(|&m| m) {
            return Err(Error::DegenerateRow { op: "pma_pool", row: 0 });
        }
        let q = tape.matmul(self.q, self.w_q)?;
        let k = tape.matmul(h, self.w_k)?;
        let v = tape.matmul(h, self.w_v)?;
        let d = tape.value(q).cols();
        if !d.is_multiple_of(self.n_heads) {
            return Err(Error::Contract(format!("pma dim {d} not divisible by {} heads", self.n_heads)));
        }
        let hd = d / self.n_heads;
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for head in 0..self.n_heads {
            let (s, e) = (head * hd, (head + 1) * hd);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let kt = tape.transpose(kh)?;
            let mut scores = tape.matmul(qh, kt)?;
            if self.scaled_attention {
                scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
            }
            let w = tape.softmax_rows(scores, Some(token_mask))?;
            heads.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let o = tape.concat_cols(&heads)?;
        let attention = tape.concat_rows(&weights)?;
        let oq = tape.add(o, q)?;
        let o_tilde = tape.layer_norm(oq, self.ln1.0, self.ln1.1, self.eps)?;
        let proj = tape.matmul(o_tilde, self.w_o)?;
        let act = tape.relu(proj);
        let res = tape.add(act, o_tilde)?;
        let embedding = tape.layer_norm(res, self.ln2.0, self.ln2.1, self.eps)?;
        Ok(PmaTrace { embedding, attention })
    }
}

/// Pools fixed hidden states into an (unnormalized) embedding.
pub fn pma_pool(h: &HiddenStates, params: &PmaParams) -> Result<Embedding> {
    Ok(pma_pool_with_attention(h, params)?.0)
}

/// Like [`pma_pool`], also returning the `n_heads × l` attention weights.
pub fn pma_pool_with_attention(h: &HiddenStates, params: &PmaParams) -> Result<(Embedding, Tensor)> {
    params.validate()?;
    if h.values.cols() != params.w_k.shape()[0] {
        return Err(Error::shape("pma_pool", h.values.shape(), params.w_k.shape()));
    }
    let mut tape = Tape::new();
    let vars = PmaVars::leaves(&mut tape, params, false);
    let hv = tape.constant(h.values.clone());
    let trace = vars.pool(&mut tape, hv, &h.token_mask)?;
    Ok((
        Embedding {
            values: tape.value(trace.embedding).clone(),
            normalized: false,
        },
        tape.value(trace.attention).clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(d_llm: usize, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> PmaParams {
        let cfg = PmaConfig {
            dim: d,
            n_heads: heads,
            d_q: d_llm,
            scaled_attention: false,
        };
        let mut p = PmaParams::init(d_llm, &cfg, 1e-5, rng);
        for t in [&mut p.q, &mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o] {
            *t = Tensor::uniform(t.shape(), 1.0, rng);
        }
        p
    }

    #[test]
    fn single_token_attends_fully() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(6, 4, 2, &mut rng);
        let h = HiddenStates::new(Tensor::uniform(&[1, 6], 1.0, &mut rng), vec![true]).unwrap();
        let (_, attn) = pma_pool_with_attention(&h, &p).unwrap();
        assert_eq!(attn.data(), &[1.0, 1.0]);
    }

    #[test]
    fn masked_rows_get_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(6, 4, 2, &mut rng);
        let h = HiddenStates::new(Tensor::uniform(&[4, 6], 1.0, &mut rng), vec![false, true, true, true]).unwrap();
        let (_, attn) = pma_pool_with_attention(&h, &p).unwrap();
        for r in 0..2 {
            assert_eq!(attn.get(r, 0), 0.0);
            assert!((attn.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_masked_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(6, 4, 2, &mut rng);
        let h = HiddenStates {
            values: Tensor::uniform(&[2, 6], 1.0, &mut rng),
            token_mask: vec![false, false],
        };
        assert!(matches!(pma_pool(&h, &p), Err(Error::DegenerateRow { .. })));
    }

    #[test]
    fn output_width_is_independent_of_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (d_llm, d, heads) in [(6, 4, 2), (16, 8, 4), (5, 3, 1)] {
            let p = random_params(d_llm, d, heads, &mut rng);
            for l in [1, 7, 20] {
                let h = HiddenStates::new(Tensor::uniform(&[l, d_llm], 1.0, &mut rng), vec![true; l]).unwrap();
                assert_eq!(pma_pool(&h, &p).unwrap().values.shape(), &[1, d]);
            }
        }
    }

    #[test]
    fn divisibility_is_validated() {
        let cfg = PmaConfig {
            dim: 6,
            n_heads: 4,
            d_q: 8,
            scaled_attention: false,
        };
        assert!(cfg.validate().is_err());
        assert!(PmaConfig::full_scale(64, 64).validate().is_ok());
    }

    #[test]
    fn scaled_flag_changes_scores_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_params(6, 4, 1, &mut rng);
        let h = HiddenStates::new(Tensor::uniform(&[3, 6], 1.0, &mut rng), vec![true; 3]).unwrap();
        let (_, a) = pma_pool_with_attention(&h, &p).unwrap();
        p.scaled_attention = true;
        let (_, b) = pma_pool_with_attention(&h, &p).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn store_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = PmaConfig::desk(16);
        let p = PmaParams::init(16, &cfg, 1e-5, &mut rng);
        let mut store = ParamStore::new();
        p.write_to(&mut store);
        assert_eq!(PmaParams::read_from(&store, &cfg, 1e-5).unwrap(), p);
    }
}
