//! Dense double-precision tensors and the small set of kernels the model needs.
//!
//! Every kernel here is a plain function over [`Tensor`] values. The
//! [`Tape`] in [`tape`] records the same kernels and adds their reverse-mode
//! rules, so forward values are computed by exactly one code path.
//!
//! Tensors are row-major. Kernels that talk about "rows" treat any tensor as
//! a matrix whose column count is the last dimension.

mod tape;

pub use tape::{finite_diff_grad, Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("valid shape")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Samples every entry from `uniform(-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when viewed as a `rows × cols` matrix.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, &self.shape, &[])),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `C = A·B` for `A: m×k`, `B: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b.data[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.matrix_dims("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    map(a, |x| x * c)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape.clone(), a.data.iter().map(|&x| f(x)).collect()).expect("same shape")
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| if v > 0.0 { v } else { 0.0 })
}

/// `x·sigmoid(x)`, the smooth activation used inside backbone feed-forward blocks.
pub fn silu(x: &Tensor) -> Tensor {
    map(x, |v| v / (1.0 + (-v).exp()))
}

/// Row-wise softmax. Entries where `mask` is `false` are excluded and come
/// out as exactly zero.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(Error::shape("softmax_rows", &x.shape, &[m.len()]));
        }
    }
    let cols = x.cols();
    let mut out = vec![0.0; x.numel()];
    for r in 0..x.rows() {
        let span = r * cols..(r + 1) * cols;
        let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let row = &x.data[span.clone()];
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow {
                op: "softmax_rows",
                row: r,
            });
        }
        let orow = &mut out[span];
        let mut total = 0.0;
        for j in 0..cols {
            if keep(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Normalized values and reciprocal standard deviations saved by [`layer_norm_parts`].
pub(crate) struct LayerNormParts {
    pub out: Tensor,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<LayerNormParts> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape("layer_norm", &x.shape, &gamma.shape));
    }
    let rows = x.rows();
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma.data[j] * h + beta.data[j];
        }
    }
    Ok(LayerNormParts {
        out: Tensor::new(x.shape.clone(), out)?,
        xhat,
        rstd,
    })
}

/// Normalizes each row over the last dimension (population variance, `eps`
/// inside the square root), then applies `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.out)
}

/// Scales each row to unit Euclidean norm. A zero row is an error.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    let mut out = x.data.clone();
    for r in 0..x.rows() {
        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric(format!("row {r} has norm {norm}")));
        }
        for v in &mut out[r * cols..(r + 1) * cols] {
            *v /= norm;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = x.matrix_dims("slice_cols")?;
    if start >= end || end > n {
        return Err(Error::shape("slice_cols", &x.shape, &[start, end]));
    }
    let w = end - start;
    let mut out = Vec::with_capacity(m * w);
    for i in 0..m {
        out.extend_from_slice(&x.data[i * n + start..i * n + end]);
    }
    Tensor::new(vec![m, w], out)
}

pub fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = x.matrix_dims("slice_rows")?;
    if start >= end || end > m {
        return Err(Error::shape("slice_rows", &x.shape, &[start, end]));
    }
    Tensor::new(vec![end - start, n], x.data[start * n..end * n].to_vec())
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
    let (m, _) = first.matrix_dims("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.matrix_dims("concat_cols")?;
        if pm != m {
            return Err(Error::shape("concat_cols", &first.shape, &p.shape));
        }
        widths.push(pn);
    }
    let n: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
    let (_, n) = first.matrix_dims("concat_rows")?;
    let mut m = 0;
    let mut out = Vec::new();
    for p in parts {
        let (pm, pn) = p.matrix_dims("concat_rows")?;
        if pn != n {
            return Err(Error::shape("concat_rows", &first.shape, &p.shape));
        }
        m += pm;
        out.extend_from_slice(&p.data);
    }
    Tensor::new(vec![m, n], out)
}

/// Selects rows of `table` by index.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (m, n) = table.matrix_dims("gather_rows")?;
    if ids.is_empty() {
        return Err(Error::Contract("gather_rows with no ids".into()));
    }
    let mut out = Vec::with_capacity(ids.len() * n);
    for &id in ids {
        if id >= m {
            return Err(Error::TokenOutOfRange { id, vocab_size: m });
        }
        out.extend_from_slice(&table.data[id * n..(id + 1) * n]);
    }
    Tensor::new(vec![ids.len(), n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let c = matmul(&m(&[&[1., 2.], &[3., 4.]]), &m(&[&[5., 6.], &[7., 8.]])).unwrap();
        assert_eq!(c, m(&[&[19., 22.], &[43., 50.]]));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        assert_eq!(matmul(&a, &Tensor::eye(4)).unwrap(), a);
        assert_eq!(matmul(&a, &Tensor::zeros(&[4, 2])).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let s = softmax_rows(&m(&[&[0.7, 0.7, 0.7]]), None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&m(&[&[0.0, 3f64.ln()]]), None).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[4, 6], 2.0, &mut rng);
        let a = softmax_rows(&x, None).unwrap();
        let b = softmax_rows(&map(&x, |v| v + 13.5), None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let x = m(&[&[1.0, 2.0, 3.0], &[0.5, -1.0, 4.0]]);
        let mask = [true, false, true, false, true, true];
        let s = softmax_rows(&x, Some(&mask)).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 0), 0.0);
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let err = softmax_rows(&x, Some(&[true, true, false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1, .. }));
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&m(&[&[1.0, 3.0]]), &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let g4 = Tensor::ones(&[4]);
        let b4 = Tensor::zeros(&[4]);
        let y = layer_norm(&m(&[&[2.5; 4]]), &g4, &b4, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[5, 4], 2.0, &mut rng);
        let y = layer_norm(&x, &g4, &b4, 0.0).unwrap();
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relu_definition_and_idempotence() {
        let x = m(&[&[-1.0, 0.0, 2.0]]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn tensor_rejects_inconsistent_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn gather_out_of_range() {
        let t = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            gather_rows(&t, &[0, 3]),
            Err(Error::TokenOutOfRange { id: 3, vocab_size: 3 })
        ));
    }
}
