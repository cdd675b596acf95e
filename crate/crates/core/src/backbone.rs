//! A small causal decoder-only transformer producing per-token hidden states.
//!
//! Blocks are pre-norm (`x + Attn(LN(x))`, then `x + MLP(LN(x))`) with a
//! final LayerNorm. Token and absolute position embeddings are learned.
//! Positions are counted over real tokens only, so left-padding a sequence
//! does not change the hidden states of its real tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdaptedLinear;
use crate::params::{Binding, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Half-width of the uniform initializer used for every weight matrix.
pub const INIT_BOUND: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            vocab_size: 260,
            d_llm: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 128,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_llm / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_llm
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_llm", self.d_llm),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be positive"));
            }
        }
        if !self.d_llm.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                format!("d_llm={} is not divisible by n_heads={}", self.d_llm, self.n_heads),
            ));
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Per-token outputs of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub values: Tensor,
    pub token_mask: Vec<bool>,
}

impl HiddenStates {
    pub fn new(values: Tensor, token_mask: Vec<bool>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != token_mask.len() {
            return Err(Error::shape("hidden states", values.shape(), &[token_mask.len()]));
        }
        if !token_mask.iter().any(|&m| m) {
            return Err(Error::DegenerateRow { op: "hidden states", row: 0 });
        }
        Ok(Self { values, token_mask })
    }

    pub fn len(&self) -> usize {
        self.token_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_mask.is_empty()
    }
}

fn block(i: usize, rest: &str) -> String {
    format!("backbone.blocks.{i}.{rest}")
}

/// Adds freshly initialized backbone weights to `store`.
pub fn init_params(store: &mut ParamStore, config: &BackboneConfig, rng: &mut impl Rng) {
    let d = config.d_llm;
    store.insert("backbone.tok_emb", Tensor::uniform(&[config.vocab_size, d], INIT_BOUND, rng));
    store.insert("backbone.pos_emb", Tensor::uniform(&[config.max_len, d], INIT_BOUND, rng));
    for i in 0..config.n_layers {
        for ln in ["ln1", "ln2"] {
            store.insert(block(i, &format!("{ln}.gamma")), Tensor::ones(&[d]));
            store.insert(block(i, &format!("{ln}.beta")), Tensor::zeros(&[d]));
        }
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(block(i, &format!("attn.{w}")), Tensor::uniform(&[d, d], INIT_BOUND, rng));
        }
        store.insert(block(i, "mlp.up"), Tensor::uniform(&[d, config.d_ff()], INIT_BOUND, rng));
        store.insert(block(i, "mlp.down"), Tensor::uniform(&[config.d_ff(), d], INIT_BOUND, rng));
    }
    store.insert("backbone.final_ln.gamma", Tensor::ones(&[d]));
    store.insert("backbone.final_ln.beta", Tensor::zeros(&[d]));
}

#[derive(Clone, Copy, Debug)]
struct LayerNormVars {
    gamma: Var,
    beta: Var,
}

impl LayerNormVars {
    fn bind(binding: &Binding, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: binding.var(&format!("{prefix}.gamma"))?,
            beta: binding.var(&format!("{prefix}.beta"))?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, eps)
    }
}

#[derive(Clone, Debug)]
struct BlockVars {
    ln1: LayerNormVars,
    wq: AdaptedLinear,
    wk: AdaptedLinear,
    wv: AdaptedLinear,
    wo: AdaptedLinear,
    ln2: LayerNormVars,
    up: Var,
    down: Var,
}

/// Backbone weights bound to a tape.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    config: BackboneConfig,
    eps: f64,
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    final_ln: LayerNormVars,
}

impl BackboneVars {
    /// `lora_scale` is `alpha / r`; adapters are used wherever they are bound.
    pub fn bind(binding: &Binding, config: &BackboneConfig, eps: f64, lora_scale: f64) -> Result<Self> {
        let blocks = (0..config.n_layers)
            .map(|i| {
                let lin = |w: &str| AdaptedLinear::bind(binding, &block(i, &format!("attn.{w}")), lora_scale);
                Ok(BlockVars {
                    ln1: LayerNormVars::bind(binding, &block(i, "ln1"))?,
                    wq: lin("wq")?,
                    wk: lin("wk")?,
                    wv: lin("wv")?,
                    wo: lin("wo")?,
                    ln2: LayerNormVars::bind(binding, &block(i, "ln2"))?,
                    up: binding.var(&block(i, "mlp.up"))?,
                    down: binding.var(&block(i, "mlp.down"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: *config,
            eps,
            tok_emb: binding.var("backbone.tok_emb")?,
            pos_emb: binding.var("backbone.pos_emb")?,
            blocks,
            final_ln: LayerNormVars::bind(binding, "backbone.final_ln")?,
        })
    }

    /// Records the forward pass for one (possibly left-padded) sequence and
    /// returns the `l × d_llm` hidden states.
    pub fn encode(&self, tape: &mut Tape, tokens: &[usize], token_mask: &[bool]) -> Result<Var> {
        let cfg = &self.config;
        let positions = validate_sequence(cfg, tokens, token_mask)?;
        let attn_mask = attention_mask(token_mask);
        let tok = tape.gather_rows(self.tok_emb, tokens)?;
        let pos = tape.gather_rows(self.pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let scale = 1.0 / (cfg.d_head() as f64).sqrt();
        for b in &self.blocks {
            let h = b.ln1.forward(tape, x, self.eps)?;
            let q = b.wq.forward(tape, h)?;
            let k = b.wk.forward(tape, h)?;
            let v = b.wv.forward(tape, h)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let (s, e) = (head * cfg.d_head(), (head + 1) * cfg.d_head());
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax_rows(scores, Some(&attn_mask))?;
                heads.push(tape.matmul(weights, vh)?);
            }
            let o = tape.concat_cols(&heads)?;
            let o = b.wo.forward(tape, o)?;
            x = tape.add(x, o)?;
            let h = b.ln2.forward(tape, x, self.eps)?;
            let up = tape.matmul(h, b.up)?;
            let act = tape.silu(up);
            let down = tape.matmul(act, b.down)?;
            x = tape.add(x, down)?;
        }
        self.final_ln.forward(tape, x, self.eps)
    }
}

/// Checks the input contract and returns position ids: pads get 0, real
/// tokens count up from 0.
pub(crate) fn validate_sequence(cfg: &BackboneConfig, tokens: &[usize], token_mask: &[bool]) -> Result<Vec<usize>> {
    if tokens.len() != token_mask.len() {
        return Err(Error::shape("encode", &[tokens.len()], &[token_mask.len()]));
    }
    if tokens.is_empty() || !token_mask.iter().any(|&m| m) {
        return Err(Error::DegenerateRow { op: "encode", row: 0 });
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_len: cfg.max_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    if token_mask.windows(2).any(|w| w[0] && !w[1]) {
        return Err(Error::Contract("token mask is not left-padded".into()));
    }
    let first_real = token_mask.iter().position(|&m| m).unwrap_or(0);
    Ok((0..tokens.len()).map(|i| i.saturating_sub(first_real)).collect())
}

/// Causal mask over real keys. A pad query only sees itself, which keeps its
/// softmax row well defined; no real query ever sees a pad key.
fn attention_mask(token_mask: &[bool]) -> Vec<bool> {
    let l = token_mask.len();
    let mut mask = vec![false; l * l];
    for i in 0..l {
        if token_mask[i] {
            for j in 0..=i {
                mask[i * l + j] = token_mask[j];
            }
        } else {
            mask[i * l + i] = true;
        }
    }
    mask
}

/// Runs the backbone once without recording gradients.
pub fn encode(
    store: &ParamStore,
    config: &BackboneConfig,
    eps: f64,
    lora_scale: f64,
    tokens: &[usize],
    token_mask: &[bool],
) -> Result<HiddenStates> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, |_| false);
    let vars = BackboneVars::bind(&binding, config, eps, lora_scale)?;
    let h = vars.encode(&mut tape, tokens, token_mask)?;
    HiddenStates::new(tape.value(h).clone(), token_mask.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(d: usize, heads: usize, layers: usize) -> (BackboneConfig, ParamStore) {
        let cfg = BackboneConfig {
            vocab_size: 12,
            d_llm: d,
            n_layers: layers,
            n_heads: heads,
            max_len: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut rng);
        // Larger weights than the default init so that layers actually mix.
        for (_, t) in store.iter_mut() {
            if t.shape().len() == 2 {
                for v in t.data_mut() {
                    *v *= 10.0;
                }
            }
        }
        (cfg, store)
    }

    fn run(cfg: &BackboneConfig, store: &ParamStore, tokens: &[usize], mask: &[bool]) -> Tensor {
        encode(store, cfg, 1e-5, 1.0, tokens, mask).unwrap().values
    }

    #[test]
    fn single_token_shape() {
        let (cfg, store) = tiny(8, 2, 2);
        let h = run(&cfg, &store, &[3], &[true]);
        assert_eq!(h.shape(), &[1, 8]);
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        let (cfg, store) = tiny(8, 2, 2);
        let a = run(&cfg, &store, &[1, 4, 7, 2, 9], &[true; 5]);
        let b = run(&cfg, &store, &[1, 4, 7, 5, 9], &[true; 5]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn left_padding_is_neutral() {
        let (cfg, store) = tiny(8, 2, 2);
        let a = run(&cfg, &store, &[1, 4, 7], &[true; 3]);
        let b = run(&cfg, &store, &[0, 0, 1, 4, 7], &[false, false, true, true, true]);
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i + 2));
        }
    }

    #[test]
    fn input_contract_errors() {
        let (cfg, store) = tiny(8, 2, 1);
        let err = encode(&store, &cfg, 1e-5, 1.0, &[12], &[true]).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 12, .. }));
        let long = vec![1; 17];
        let err = encode(&store, &cfg, 1e-5, 1.0, &long, &[true; 17]).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 17, max_len: 16 }));
        assert!(encode(&store, &cfg, 1e-5, 1.0, &[1, 2], &[true, false]).is_err());
        assert!(encode(&store, &cfg, 1e-5, 1.0, &[1, 2], &[false, false]).is_err());
    }

    #[test]
    fn divisibility_is_validated() {
        let cfg = BackboneConfig {
            d_llm: 10,
            n_heads: 4,
            ..BackboneConfig::desk()
        };
        assert!(cfg.validate().is_err());
        assert!(BackboneConfig::desk().validate().is_ok());
    }

    /// Straight-line single-layer, single-head transformer written with
    /// plain loops, sharing no code with the tape path.
    fn naive_one_layer(store: &ParamStore, tokens: &[usize]) -> Vec<Vec<f64>> {
        let p = |n: &str| store.get(n).unwrap();
        let d = 4;
        let l = tokens.len();
        let ln = |x: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d)
                .map(|j| g.data()[j] * (x[j] - mean) / (var + 1e-5).sqrt() + b.data()[j])
                .collect()
        };
        let vecmat = |x: &[f64], w: &Tensor| -> Vec<f64> {
            let cols = w.shape()[1];
            (0..cols).map(|j| (0..x.len()).map(|t| x[t] * w.get(t, j)).sum()).collect()
        };
        let mut x: Vec<Vec<f64>> = (0..l)
            .map(|i| (0..d).map(|j| p("backbone.tok_emb").get(tokens[i], j) + p("backbone.pos_emb").get(i, j)).collect())
            .collect();
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| ln(r, p("backbone.blocks.0.ln1.gamma"), p("backbone.blocks.0.ln1.beta")))
            .collect();
        let q: Vec<_> = h.iter().map(|r| vecmat(r, p("backbone.blocks.0.attn.wq"))).collect();
        let k: Vec<_> = h.iter().map(|r| vecmat(r, p("backbone.blocks.0.attn.wk"))).collect();
        let v: Vec<_> = h.iter().map(|r| vecmat(r, p("backbone.blocks.0.attn.wv"))).collect();
        for i in 0..l {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let o: Vec<f64> = (0..d)
                .map(|t| (0..=i).map(|j| scores[j].exp() / z * v[j][t]).sum())
                .collect();
            let o = vecmat(&o, p("backbone.blocks.0.attn.wo"));
            for t in 0..d {
                x[i][t] += o[t];
            }
            let h2 = ln(&x[i], p("backbone.blocks.0.ln2.gamma"), p("backbone.blocks.0.ln2.beta"));
            let up: Vec<f64> = vecmat(&h2, p("backbone.blocks.0.mlp.up"))
                .into_iter()
                .map(|u| u / (1.0 + (-u).exp()))
                .collect();
            let down = vecmat(&up, p("backbone.blocks.0.mlp.down"));
            for t in 0..d {
                x[i][t] += down[t];
            }
        }
        x.iter()
            .map(|r| ln(r, p("backbone.final_ln.gamma"), p("backbone.final_ln.beta")))
            .collect()
    }

    #[test]
    fn matches_naive_attention_oracle() {
        let (cfg, mut store) = tiny(4, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for name in ["ln1", "ln2"] {
            store.insert(format!("backbone.blocks.0.{name}.gamma"), Tensor::uniform(&[4], 1.5, &mut rng));
            store.insert(format!("backbone.blocks.0.{name}.beta"), Tensor::uniform(&[4], 0.5, &mut rng));
        }
        let tokens = [3, 0, 11];
        let got = run(&cfg, &store, &tokens, &[true; 3]);
        let expect = naive_one_layer(&store, &tokens);
        let expect = Tensor::from_rows(&expect).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-10, "{}", got.max_abs_diff(&expect));
    }
}
