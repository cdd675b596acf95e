//! Contrastive objectives over cosine similarity.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

fn check_pair(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape(op, sa, sb));
    }
    Ok(())
}

/// Cosine logits `cos(aᵢ, bⱼ) / tau`, shape `rows(a) × rows(b)`.
fn cosine_logits(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let bt = tape.transpose(bn)?;
    let sims = tape.matmul(an, bt)?;
    Ok(tape.scale(sims, 1.0 / tau))
}

/// In-batch InfoNCE: row `i` of `docs` is the positive for row `i` of
/// `queries`; every other row is a negative. Mean over queries.
pub fn in_batch_loss(tape: &mut Tape, queries: Var, docs: Var, tau: f64) -> Result<Var> {
    check_pair(tape, queries, docs, "in_batch_loss")?;
    let b = tape.value(queries).rows();
    if b == 0 || tape.value(docs).rows() != b {
        return Err(Error::shape("in_batch_loss", tape.value(queries).shape(), tape.value(docs).shape()));
    }
    let logits = cosine_logits(tape, queries, docs, tau)?;
    let targets: Vec<usize> = (0..b).collect();
    tape.cross_entropy(logits, &targets)
}

/// Hard-negative loss for one query: the positive competes against the
/// query's own negatives only. With no negatives the loss is 0.
pub fn hard_negative_loss(
    tape: &mut Tape,
    query: Var,
    positive: Var,
    negatives: Option<Var>,
    tau: f64,
) -> Result<Var> {
    check_pair(tape, query, positive, "hard_negative_loss")?;
    if tape.value(query).rows() != 1 || tape.value(positive).rows() != 1 {
        return Err(Error::shape("hard_negative_loss", tape.value(query).shape(), tape.value(positive).shape()));
    }
    let Some(negs) = negatives else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    check_pair(tape, query, negs, "hard_negative_loss")?;
    let candidates = tape.concat_rows(&[positive, negs])?;
    let logits = cosine_logits(tape, query, candidates, tau)?;
    tape.cross_entropy(logits, &[0])
}

/// Stacks per-rank embedding blocks in rank order.
pub fn global_gather(tape: &mut Tape, blocks: &[Var]) -> Result<Var> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Contract("global_gather with no ranks".into()))?;
    let shape = tape.value(*first).shape().to_vec();
    for b in blocks {
        if tape.value(*b).shape() != shape.as_slice() {
            return Err(Error::shape("global_gather", &shape, tape.value(*b).shape()));
        }
    }
    tape.concat_rows(blocks)
}

/// [`in_batch_loss`] on plain tensors.
pub fn in_batch_loss_value(queries: &Tensor, docs: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let d = tape.constant(docs.clone());
    let l = in_batch_loss(&mut tape, q, d, tau)?;
    tape.value(l).item()
}

/// [`hard_negative_loss`] on plain tensors; `negatives` may have zero rows
/// when passed as `None`.
pub fn hard_negative_loss_value(query: &Tensor, positive: &Tensor, negatives: Option<&Tensor>, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let p = tape.constant(positive.clone());
    let n = negatives.map(|n| tape.constant(n.clone()));
    let l = hard_negative_loss(&mut tape, q, p, n, tau)?;
    tape.value(l).item()
}

/// [`global_gather`] on plain tensors.
pub fn global_gather_value(blocks: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = blocks.iter().map(|b| tape.constant(b.clone())).collect();
    let g = global_gather(&mut tape, &vars)?;
    Ok(tape.value(g).clone())
}
