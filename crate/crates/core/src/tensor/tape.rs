//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Each operation appends one node holding its output and whatever forward
//! quantities its gradient rule needs. Nodes only ever reference earlier
//! nodes, so walking the tape backwards is a valid reverse topological order.

use super::{self as k, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records a compute graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input. Gradients are produced for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(false);
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = k::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), out, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = k::scale(self.value(a), c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = k::relu(self.value(a));
        self.push(Op::Relu(a), out, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = k::silu(self.value(a));
        self.push(Op::Silu(a), out, &[a])
    }

    /// Row-wise softmax; see [`k::softmax_rows`]. The mask is a constant.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = k::softmax_rows(self.value(x), mask)?;
        Ok(self.push(Op::Softmax(x), out, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let parts = k::layer_norm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: parts.xhat,
                rstd: parts.rstd,
            },
            parts.out,
            &[x, gamma, beta],
        ))
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms = (0..xv.rows())
            .map(|r| xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = k::normalize_rows(xv)?;
        Ok(self.push(Op::NormalizeRows { x, norms }, out, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = k::slice_cols(self.value(x), start, end)?;
        Ok(self.push(Op::SliceCols { x, start }, out, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = k::slice_rows(self.value(x), start, end)?;
        Ok(self.push(Op::SliceRows { x, start }, out, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = k::concat_cols(&values)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = k::concat_rows(&values)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, parts))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = k::gather_rows(self.value(table), ids)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            &[table],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
            return Err(Error::Contract(format!(
                "cross_entropy targets {targets:?} do not fit logits {:?}",
                lv.shape()
            )));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + denom.ln();
            total += log_z - row[target];
            for j in 0..cols {
                probs[r * cols + j] = (row[j] - log_z).exp();
            }
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            out,
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.requires_grad => Some(g),
                (None, Op::Leaf) if n.requires_grad => Some(vec![0.0; n.value.numel()]),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            delta(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, kk) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(*a, &|ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        for t in 0..kk {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv.data()[t * n + j];
                            }
                            ga[i * kk + t] += s;
                        }
                    }
                });
                acc(*b, &|gb| {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        for t in 0..kk {
                            let a_it = av.data()[i * kk + t];
                            let row = &mut gb[t * n..(t + 1) * n];
                            for (o, &gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += a_it * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (y.shape()[1], y.shape()[0]);
                acc(*a, &|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &|gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| {
                for (o, &gv) in ga.iter_mut().zip(g) {
                    *o += gv * c;
                }
            }),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &|ga| {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                acc(*a, &|ga| {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        let s = 1.0 / (1.0 + (-xv).exp());
                        *o += gv * (s + xv * s * (1.0 - s));
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = y.cols();
                acc(*x, &|gx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = y.cols();
                let rows = y.rows();
                let gam = self.value(*gamma).data();
                acc(*gamma, &|gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &|gb| {
                    for r in 0..rows {
                        add_into(gb, &g[r * d..(r + 1) * d]);
                    }
                });
                acc(*x, &|gx| {
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> =
                            g[span.clone()].iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            gx[r * d + j] +=
                                rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let cols = y.cols();
                acc(*x, &|gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = y.cols();
                acc(*x, &|gx| {
                    for i in 0..y.rows() {
                        add_into(&mut gx[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = y.cols();
                acc(*x, &|gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let n = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &|gp| {
                        for i in 0..y.rows() {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &|gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                let n = y.cols();
                acc(*table, &|gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                let rows = targets.len() as f64;
                acc(*logits, &|gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..cols {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * cols + j] += g[0] * (probs[r * cols + j] - onehot) / rows;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of one backward pass, indexed by leaf [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf created with `requires_grad = true`; `None` otherwise.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    /// Checks every leaf gradient of `build` against central differences.
    fn check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        for (i, input) in inputs.iter().enumerate() {
            let eval = |probe: &Tensor| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.leaf(if i == j { probe.clone() } else { x.clone() }, false))
                    .collect();
                let out = build(&mut t, &vs);
                t.value(out).item().unwrap()
            };
            let fd = finite_diff_grad(eval, input, 1e-4).unwrap();
            let err = rel_err(grads.get(vars[i]).unwrap(), fd.data());
            assert!(err < 1e-5, "input {i}: relative error {err}");
        }
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(shape, 2.0, rng)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap(), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let data = vec![0.5, -1.5, 2.0, 3.25];
        let x = tape.leaf(Tensor::new(vec![4], data.clone()).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn relu_gradient_matches_finite_difference() {
        let x = Tensor::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let r = tape.relu(v);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[0.0, 1.0]);
        let fd = finite_diff_grad(|t| crate::tensor::relu(t).data().iter().sum(), &x, 1e-4).unwrap();
        assert!(rel_err(fd.data(), &[0.0, 1.0]) < 1e-10);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[1, 3]), true);
        let r = tape.relu(v);
        let s = tape.sum(r);
        assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn finite_diff_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_t(&[2, 3], &mut rng);
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-4).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &Tensor::scalar(3.0), 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_t(&[3, 4], &mut rng);
        let b = rand_t(&[4, 2], &mut rng);
        let run = || {
            let mut t = Tape::new();
            let av = t.leaf(a.clone(), true);
            let bv = t.leaf(b.clone(), true);
            let c = t.matmul(av, bv).unwrap();
            let s = t.softmax_rows(c, None).unwrap();
            let sq = t.mul(s, s).unwrap();
            let l = t.sum(sq);
            let g = t.backward(l).unwrap();
            (g.get(av).unwrap().to_vec(), g.get(bv).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = rand_t(&[3, 4], &mut rng);
            let b = rand_t(&[4, 5], &mut rng);
            let w = rand_t(&[3, 5], &mut rng);
            check(&[a, b, w], |t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                let c = t.mul(c, v[2]).unwrap();
                t.sum(c)
            });

            let x = rand_t(&[3, 5], &mut rng);
            let w = rand_t(&[3, 5], &mut rng);
            let mask: Vec<bool> = (0..15).map(|i| i % 5 != 2).collect();
            check(&[x, w], |t, v| {
                let s = t.softmax_rows(v[0], Some(&mask)).unwrap();
                let s = t.mul(s, v[1]).unwrap();
                t.sum(s)
            });

            let x = rand_t(&[4, 6], &mut rng);
            let g = rand_t(&[6], &mut rng);
            let b = rand_t(&[6], &mut rng);
            let w = rand_t(&[4, 6], &mut rng);
            check(&[x, g, b, w], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let y = t.mul(y, v[3]).unwrap();
                t.sum(y)
            });

            let x = rand_t(&[3, 4], &mut rng);
            let w = rand_t(&[3, 4], &mut rng);
            check(&[x, w], |t, v| {
                let y = t.normalize_rows(v[0]).unwrap();
                let s = t.silu(v[0]);
                let y = t.add(y, s).unwrap();
                let y = t.mul(y, v[1]).unwrap();
                let y = t.scale(y, -0.7);
                t.sum(y)
            });

            let x = rand_t(&[4, 6], &mut rng);
            let w = rand_t(&[6, 4], &mut rng);
            check(&[x, w], |t, v| {
                let l = t.slice_cols(v[0], 0, 2).unwrap();
                let r = t.slice_cols(v[0], 2, 6).unwrap();
                let c = t.concat_cols(&[r, l]).unwrap();
                let top = t.slice_rows(c, 0, 1).unwrap();
                let c = t.concat_rows(&[c, top]).unwrap();
                let tr = t.transpose(c).unwrap();
                let tr = t.slice_rows(tr, 0, 6).unwrap();
                let tr = t.slice_cols(tr, 0, 4).unwrap();
                let y = t.mul(tr, v[1]).unwrap();
                let y = t.mul(y, y).unwrap();
                t.mean(y)
            });

            let table = rand_t(&[5, 3], &mut rng);
            let w = rand_t(&[4, 3], &mut rng);
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            check(&[table, w], |t, v| {
                let e = t.gather_rows(v[0], &[4, 1, 4, 0]).unwrap();
                let e = t.mul(e, v[1]).unwrap();
                t.cross_entropy(e, &targets).unwrap()
            });
        }
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::from_rows(&[vec![-1.3, 0.4, 2.2, -0.2]]).unwrap();
        check(&[x], |t, v| {
            let r = t.relu(v[0]);
            let r = t.mul(r, r).unwrap();
            t.sum(r)
        });
    }

    #[test]
    fn non_grad_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 2]), false);
        let b = tape.leaf(Tensor::ones(&[2, 2]), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn unused_grad_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2]), true);
        let b = tape.leaf(Tensor::ones(&[3]), true);
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[0.0; 3]);
    }
}
