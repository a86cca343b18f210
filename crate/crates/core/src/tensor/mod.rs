//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Each operation records its
//! inputs and a backward rule; [`Graph::backward`] walks the arena from the
//! newest node to the oldest, so gradient contributions from fan-out are
//! summed in a fixed order and repeated calls give bitwise-identical results.
//!
//! Storage is row-major and contiguous. There are no views and no general
//! broadcasting: [`Graph::add_bias`] (a trailing-axis vector added to every
//! row) is the only broadcast the encoder needs.
//!
//! GELU uses the tanh approximation
//! `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`, see [`kernels::GELU_SQRT_2_OVER_PI`]
//! and [`kernels::GELU_CUBIC`].

mod backward;
mod gradcheck;
pub mod kernels;

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result};

pub use gradcheck::{finite_diff_check, GradCheck, REL_FLOOR};

/// Handle to a node of a [`Graph`]. Rank-0 handles play the role of scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a [`Graph::custom`] operation: given the input
/// values, the output value and the output gradient, return one gradient per
/// input.
pub type CustomVjp<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>> + Send + Sync>;

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Tensor, Tensor),
    BatchedMatMul {
        a: Tensor,
        b: Tensor,
        transpose_b: bool,
    },
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, T),
    AddBias(Tensor, Tensor),
    Softmax(Tensor),
    LogSoftmax(Tensor),
    MaskFill(Tensor, Vec<bool>),
    Gelu(Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        /// Per-row `(mean, 1/sqrt(var + eps))`.
        stats: Vec<(T, T)>,
    },
    SelectRows(Tensor, Vec<usize>),
    Gather(Tensor, Vec<usize>),
    Sum(Tensor),
    KlDiv(Tensor, Tensor),
    Custom(Vec<Tensor>, CustomVjp<T>),
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Arena holding one computation graph.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&n) if n >= 1 => Ok(n),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("needs a non-empty trailing axis, got {shape:?}"),
        }),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tensor) -> &[T] {
        &self.nodes[t.0].value
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to
    /// `t`. `None` when `t` does not require gradients or backward has not run.
    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self, t: Tensor) -> T {
        let v = self.value(t);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    /// New leaf. `values.len()` must equal the product of `shape`.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) || numel(shape) != values.len() {
            return Err(Error::InvalidShape {
                op: "leaf",
                msg: format!("shape {shape:?} does not hold {} values", values.len()),
            });
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        self.leaf(shape, values, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, value: T) -> Tensor {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    /// Copy of `t` cut off from the graph: no gradient flows back through it.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let n = &self.nodes[t.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// Batched product over the leading axis: `a[n×m×k] · b[n×k×p]`, or
    /// `a[n×m×k] · b[n×p×k]ᵀ` when `transpose_b`.
    pub fn batched_matmul(&mut self, a: Tensor, b: Tensor, transpose_b: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "batched_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let p = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * p];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            let ai = &va[i * m * k..(i + 1) * m * k];
            let bi = &vb[i * k * p..(i + 1) * k * p];
            let ci = &mut out[i * m * p..(i + 1) * m * p];
            if transpose_b {
                kernels::gemm_nt(m, k, p, ai, bi, ci);
            } else {
                kernels::gemm_nn(m, k, p, ai, bi, ci);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![batch, m, p], out, rg, Op::BatchedMatMul { a, b, transpose_b }))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Tensor, perm: &[usize]) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !core::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let out = kernels::permute(&shape, perm, self.value(x));
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, rg, Op::Permute(x, perm.to_vec())))
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Tensor, b: Tensor, f: impl Fn(T, T) -> T, op: Op<T>) -> Tensor {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, rg, op)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Tensor, c: T) -> Tensor {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Scale(x, c))
    }

    /// `x[..., n] + bias[n]` for every trailing-axis row of `x`.
    pub fn add_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let n = last_dim("add_bias", self.shape(x))?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, rg, Op::AddBias(x, bias)))
    }

    /// Rows with any NaN or `+inf`, or with every entry `-inf`, are rejected.
    /// `-inf` entries mark excluded positions and get probability zero.
    fn check_rows(&self, op: &'static str, x: Tensor, n: usize) -> Result<()> {
        for (r, row) in self.value(x).chunks_exact(n).enumerate() {
            if let Some(j) = row.iter().position(|v| v.is_nan() || *v == T::infinity()) {
                return Err(Error::NonFinite { op, index: r * n + j });
            }
            if row.iter().all(|v| *v == T::neg_infinity()) {
                return Err(Error::NonFinite { op, index: r * n });
            }
        }
        Ok(())
    }

    /// Softmax over the trailing axis, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let n = last_dim("softmax_rows", self.shape(x))?;
        self.check_rows("softmax_rows", x, n)?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::Softmax(x)))
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let n = last_dim("log_softmax_rows", self.shape(x))?;
        self.check_rows("log_softmax_rows", x, n)?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::LogSoftmax(x)))
    }

    /// Sets the entries where `mask` is true to `-inf`; those entries pass no
    /// gradient.
    pub fn mask_fill_neg_inf(&mut self, x: Tensor, mask: Vec<bool>) -> Result<Tensor> {
        if mask.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "mask_fill_neg_inf",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { T::neg_infinity() } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::MaskFill(x, mask)))
    }

    pub fn gelu(&mut self, x: Tensor) -> Tensor {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Gelu(x))
    }

    /// Per-row normalisation to zero mean and unit (biased) variance, then
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor, eps: T) -> Result<Tensor> {
        let d = last_dim("layer_norm", self.shape(x))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if !(eps > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut out = self.value(x).to_vec();
        let mut stats = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *v = (*v - mean) * rstd * gv + bv;
            }
            stats.push((mean, rstd));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Rows `rows[i]` of a rank-2 tensor, in order; repeats allowed.
    pub fn select_rows(&mut self, x: Tensor, rows: &[usize]) -> Result<Tensor> {
        let shape = self.shape(x);
        if shape.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::InvalidShape {
                op: "select_rows",
                msg: format!("cannot select {} rows from {shape:?}", rows.len()),
            });
        }
        let d = shape[1];
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&v[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows.len(), d], out, rg, Op::SelectRows(x, rows.to_vec())))
    }

    /// Elements at flat (row-major) indices, as a rank-1 tensor.
    pub fn gather(&mut self, x: Tensor, indices: &[usize]) -> Result<Tensor> {
        let len = self.value(x).len();
        if indices.is_empty() || indices.iter().any(|&i| i >= len) {
            return Err(Error::InvalidShape {
                op: "gather",
                msg: format!("indices out of range for {} elements", len),
            });
        }
        let v = self.value(x);
        let out = indices.iter().map(|&i| v[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![indices.len()], out, rg, Op::Gather(x, indices.to_vec())))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], rg, Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Tensor) -> Tensor {
        let n = T::from_f64(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// `Σ p·(ln p − ln q)` over all elements, with `0·ln 0 = 0`.
    pub fn kl_div(&mut self, p: Tensor, q: Tensor) -> Result<Tensor> {
        self.same_shape("kl_div", p, q)?;
        let mut total = T::zero();
        for (&pv, &qv) in self.value(p).iter().zip(self.value(q)) {
            if pv > T::zero() {
                total += pv * (pv.ln() - qv.ln());
            }
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(Vec::new(), vec![total], rg, Op::KlDiv(p, q)))
    }

    /// Operation with a caller-supplied value and vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Tensor], shape: &[usize], value: Vec<T>, vjp: CustomVjp<T>) -> Result<Tensor> {
        if numel(shape) != value.len() {
            return Err(Error::InvalidShape {
                op: "custom",
                msg: format!("shape {shape:?} does not hold {} values", value.len()),
            });
        }
        let rg = self.rg(inputs);
        Ok(self.push(shape.to_vec(), value, rg, Op::Custom(inputs.to_vec(), vjp)))
    }
}

/// Numerically stable in-place softmax of one row; `-inf` entries become 0.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests;
