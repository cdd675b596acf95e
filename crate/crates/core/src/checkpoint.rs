//! Checkpoint container and weighted checkpoint merging.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "C2PM" | version: u32 | meta_len: u64 | meta: UTF-8 JSON
//!        | n_params: u64
//!        | n_params × (name_len: u64 | name | rank: u64 | dims: rank × u64 | data: f64 × numel)
//! ```
//!
//! Records are written in name order, so equal parameters give equal bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"C2PM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
    /// Adapters have been folded into the base weights.
    pub merged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub config_hash: String,
    /// Produced by a weighted merge of several checkpoints.
    pub merged: bool,
    pub seed: u64,
    pub model: ModelConfig,
    pub lora: LoraMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: usize, config_hash: &str, seed: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                step,
                config_hash: config_hash.to_owned(),
                merged: false,
                seed,
                model: model.config,
                lora: LoraMeta {
                    rank: model.config.lora.rank,
                    alpha: model.config.lora.alpha,
                    merged: false,
                },
            },
            params: model.params.clone(),
        }
    }

    pub fn to_model(&self) -> Model {
        Model {
            config: self.meta.model,
            params: self.params.clone(),
        }
    }

    /// Folds every LoRA adapter into its base weight. Refuses to fold twice.
    pub fn fold_adapters(&mut self) -> Result<()> {
        if self.meta.lora.merged {
            return Err(Error::Contract("adapters are already merged into this checkpoint".into()));
        }
        lora::fold_all(&mut self.params, self.meta.model.lora)?;
        self.meta.lora.merged = true;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = read_len(&mut r, bytes.len())?;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let n = read_len(&mut r, bytes.len())?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name_len = read_len(&mut r, bytes.len())?;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rank = read_len(&mut r, bytes.len())?;
            let shape = (0..rank)
                .map(|_| read_len(&mut r, bytes.len()))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel
                .filter(|&n| n.saturating_mul(8) <= r.len())
                .ok_or_else(|| Error::Format(format!("parameter `{name}` shape {shape:?} exceeds file")))?;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            if params.contains(&name) {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable summary for `c2 inspect`.
    pub fn describe(&self) -> String {
        let mut out = format!(
            "step {}  merged {}  seed {}  config {}\nlora r={} alpha={} folded={}\nmodel {}\n{} tensors, {} values\n",
            self.meta.step,
            self.meta.merged,
            self.meta.seed,
            self.meta.config_hash,
            self.meta.lora.rank,
            self.meta.lora.alpha,
            self.meta.lora.merged,
            serde_json::to_string(&self.meta.model).expect("config serializes"),
            self.params.len(),
            self.params.num_values(),
        );
        for (name, t) in self.params.iter() {
            out.push_str(&format!("  {name:<44} {:?}  |x|={:.6}\n", t.shape(), t.l2_norm()));
        }
        out
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a u64 length and rejects values that cannot fit in the file.
fn read_len(r: &mut &[u8], limit: usize) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let v = u64::from_le_bytes(b);
    usize::try_from(v)
        .ok()
        .filter(|&v| v <= limit)
        .ok_or_else(|| Error::Format(format!("implausible length {v}")))
}

/// `θ = Σ wᵢ·θᵢ` over every parameter, with weights normalized to sum to 1.
///
/// Computed as `θ_ref + Σ wᵢ·(θᵢ − θ_ref)` where `θ_ref` is the first
/// checkpoint with non-zero weight, so one-hot weights and identical inputs
/// reproduce a checkpoint bit for bit.
pub fn merge_checkpoints(checkpoints: &[Checkpoint], weights: &[f64]) -> Result<Checkpoint> {
    if checkpoints.is_empty() {
        return Err(Error::Contract("merge needs at least one checkpoint".into()));
    }
    if checkpoints.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} checkpoints but {} weights",
            checkpoints.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Contract(format!("merge weights must be finite and non-negative: {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("merge weights sum to zero".into()));
    }
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let first = &checkpoints[0];
    for ck in &checkpoints[1..] {
        if ck.meta.model != first.meta.model || ck.meta.lora != first.meta.lora {
            return Err(Error::Merge {
                param: "<metadata>".into(),
                reason: "model configuration or adapter state differs".into(),
            });
        }
        for (name, t) in first.params.iter() {
            let other = ck.params.get(name).map_err(|_| Error::Merge {
                param: name.to_owned(),
                reason: "missing from a checkpoint".into(),
            })?;
            if other.shape() != t.shape() {
                return Err(Error::Merge {
                    param: name.to_owned(),
                    reason: format!("shape {:?} vs {:?}", t.shape(), other.shape()),
                });
            }
        }
        if let Some(extra) = ck.params.names().find(|n| !first.params.contains(n)) {
            return Err(Error::Merge {
                param: extra.to_owned(),
                reason: "not present in the first checkpoint".into(),
            });
        }
    }

    let reference = weights.iter().position(|&w| w > 0.0).expect("positive total");
    let base = &checkpoints[reference];
    let mut params = base.params.clone();
    for (name, out) in params.iter_mut() {
        for (i, ck) in checkpoints.iter().enumerate() {
            if i == reference || weights[i] == 0.0 {
                continue;
            }
            let theta = ck.params.get(name)?.data();
            let base_theta = base.params.get(name)?.data();
            for ((o, &t), &b) in out.data_mut().iter_mut().zip(theta).zip(base_theta) {
                let diff = t - b;
                if diff != 0.0 {
                    *o += weights[i] * diff;
                }
            }
        }
    }

    let mut meta = base.meta.clone();
    meta.step = checkpoints.iter().map(|c| c.meta.step).max().unwrap_or(0);
    meta.merged = true;
    Ok(Checkpoint { meta, params })
}
