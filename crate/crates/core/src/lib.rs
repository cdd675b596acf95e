//! Code embeddings from a small causal transformer pooled by multihead
//! attention, with contrastive LoRA fine-tuning and retrieval evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod params;
pub mod pma;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
