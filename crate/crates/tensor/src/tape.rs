//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node that
//! remembers its inputs plus whatever the local gradient rule needs.
//! [`Tape::backward`] walks the nodes from the loss back to the first
//! recorded node, visiting each exactly once, and accumulates gradients
//! into the leaves that were created with `requires_grad`.

use std::rc::Rc;

use crate::error::{dim_err, Result, TensorError};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Epsilon used by layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Swish(Var),
    Glu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    DepthwiseConv(Var, Var),
    Gather(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Per-column statistics produced by [`Tape::batchnorm_train`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Computation tape. Single-threaded; one per forward/backward session.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return dim_err(op, sa, sb);
        }
        Ok(())
    }

    /// Checks that `row` is a rank-1 vector matching the last extent of `x`.
    fn row_shape(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.len() != 1 || sr[0] != *sx.last().unwrap_or(&0) {
            return dim_err(op, sx, sr);
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.require_rank("transpose", 2)?;
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let src = x.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    // ----------------------------------------------------------- elementwise

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a per-last-dim vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_shape("add_row", x, row)?;
        let mut value = self.value(x).clone();
        let r = self.value(row).data();
        let c = r.len();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += r[i % c];
        }
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    /// Multiplies every row of `x` elementwise by a per-last-dim vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_shape("mul_row", x, row)?;
        let mut value = self.value(x).clone();
        let r = self.value(row).data();
        let c = r.len();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= r[i % c];
        }
        Ok(self.push(value, Op::MulRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Swish(x), &[x])
    }

    /// Gated linear unit: splits the last axis into halves `[a, b]` and
    /// returns `a * sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if c % 2 != 0 {
            return dim_err("glu", t.shape(), &[c]);
        }
        let h = c / 2;
        let rows = t.rows();
        let src = t.data();
        let mut out = Vec::with_capacity(rows * h);
        for i in 0..rows {
            let row = &src[i * c..(i + 1) * c];
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = h;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Glu(x), &[x]))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if c == 0 {
            return dim_err("softmax_lastdim", t.shape(), &[1]);
        }
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NaN {
                op: "softmax_lastdim",
            });
        }
        let mut value = t.clone();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    // --------------------------------------------------------- normalization

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.row_shape("layernorm", x, gain)?;
        self.row_shape("layernorm", x, bias)?;
        let eps = T::lit(LAYERNORM_EPS);
        let t = self.value(x);
        let c = t.cols();
        let rows = t.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        let n = T::lit(c as f64);
        for row in t.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Batch normalization of a `[rows × features]` tensor using the
    /// statistics of the rows themselves. Returns the biased per-feature
    /// mean and variance so the caller can maintain running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        self.row_shape("batchnorm", x, gain)?;
        self.row_shape("batchnorm", x, bias)?;
        let t = self.value(x);
        t.require_rank("batchnorm", 2)?;
        let (rows, c) = (t.rows(), t.cols());
        if rows == 0 {
            return dim_err("batchnorm", t.shape(), &[1, c]);
        }
        let src = t.data();
        let n = T::lit(rows as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for row in src.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for row in src.chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.column_affine(x, gain, bias, &mean, &inv_std);
        let var_node = self.push(
            value,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[x, gain, bias],
        );
        Ok((var_node, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.row_shape("batchnorm", x, gain)?;
        self.row_shape("batchnorm", x, bias)?;
        let c = self.value(x).cols();
        if running_mean.len() != c || running_var.len() != c {
            return dim_err("batchnorm", self.shape(x), &[running_mean.len()]);
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let (value, xhat) = self.column_affine(x, gain, bias, running_mean, &inv_std);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[x, gain, bias],
        ))
    }

    fn column_affine(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> (Tensor<T>, Vec<T>) {
        let t = self.value(x);
        let c = t.cols();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(t.len());
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        (
            Tensor::new(t.shape().to_vec(), out).expect("same shape"),
            xhat,
        )
    }

    // ------------------------------------------------------------ structural

    /// Depthwise 1-D convolution along rows (time) with same padding.
    /// `x` is `[T × D]`, `kernel` is `[K × D]` with odd `K`; tap `k` reads
    /// row `t + k - (K-1)/2`.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 2 || sk.len() != 2 || sx[1] != sk[1] {
            return dim_err("conv1d_depthwise", sx, sk);
        }
        let (t_len, d) = (sx[0], sx[1]);
        let k_len = sk[0];
        if k_len % 2 == 0 {
            return Err(TensorError::Config(format!(
                "depthwise kernel size must be odd, got {k_len}"
            )));
        }
        let pad = (k_len - 1) / 2;
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let mut out = vec![T::zero(); t_len * d];
        for t in 0..t_len {
            let dst = &mut out[t * d..(t + 1) * d];
            for k in 0..k_len {
                let src_t = t + k;
                if src_t < pad || src_t - pad >= t_len {
                    continue;
                }
                let src = &xs[(src_t - pad) * d..(src_t - pad + 1) * d];
                let w = &ks[k * d..(k + 1) * d];
                for j in 0..d {
                    dst[j] += w[j] * src[j];
                }
            }
        }
        let value = Tensor::new(vec![t_len, d], out)?;
        Ok(self.push(value, Op::DepthwiseConv(x, kernel), &[x, kernel]))
    }

    /// Row-wise gather: `out[i, j] = x[i, index[i * cols_out + j]]`.
    pub fn gather_cols(&mut self, x: Var, index: Rc<[usize]>, cols_out: usize) -> Result<Var> {
        let t = self.value(x);
        t.require_rank("gather_cols", 2)?;
        let (rows, c) = (t.rows(), t.cols());
        if index.len() != rows * cols_out || index.iter().any(|&i| i >= c) {
            return dim_err("gather_cols", t.shape(), &[rows, cols_out]);
        }
        let src = t.data();
        let out: Vec<T> = index
            .iter()
            .enumerate()
            .map(|(p, &j)| src[(p / cols_out) * c + j])
            .collect();
        let value = Tensor::new(vec![rows, cols_out], out)?;
        Ok(self.push(value, Op::Gather(x, index), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        t.require_rank("slice_cols", 2)?;
        let (rows, c) = (t.rows(), t.cols());
        if start + len > c {
            return dim_err("slice_cols", t.shape(), &[start, len]);
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in t.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return dim_err("concat_cols", self.shape(first), s);
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        t.require_rank("slice_rows", 2)?;
        let c = t.cols();
        if start + len > t.rows() {
            return dim_err("slice_rows", t.shape(), &[start, len]);
        }
        let out = t.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], out)?;
        Ok(self.push(value, Op::SliceRows(x, start), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let c = self.shape(first)[1];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != c {
                return dim_err("concat_rows", self.shape(first), s);
            }
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.shape(p)[0];
        }
        let value = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::lit(t.len().max(1) as f64);
        let value = Tensor::scalar(t.sum() / n);
        self.push(value, Op::Mean(x), &[x])
    }

    // -------------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, adding `dLoss/dLeaf` into the
    /// gradient accumulator of every leaf created with `requires_grad`.
    /// Calling it again without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            self.propagate(i, &dy, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                match node.grad.as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_elementwise(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(g) = self.slot(grads, v) {
            for (k, gv) in g.iter_mut().enumerate() {
                *gv += f(k);
            }
        }
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, dy, false, bv, true, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, av, true, dy, false, gb, true);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(g) = self.slot(grads, *a) {
                    for p in 0..r {
                        for q in 0..c {
                            g[p * c + q] += dy[q * r + p];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_elementwise(grads, *a, |k| dy[k]);
                self.acc_elementwise(grads, *b, |k| dy[k]);
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(grads, *a, |k| dy[k]);
                self.acc_elementwise(grads, *b, |k| -dy[k]);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc_elementwise(grads, *a, |k| dy[k] * bv[k]);
                self.acc_elementwise(grads, *b, |k| dy[k] * av[k]);
            }
            Op::AddRow(x, row) => {
                self.acc_elementwise(grads, *x, |k| dy[k]);
                if let Some(g) = self.slot(grads, *row) {
                    let c = g.len();
                    for (k, &d) in dy.iter().enumerate() {
                        g[k % c] += d;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let xv = self.value(*x).data();
                let rv = self.value(*row).data();
                let c = rv.len();
                self.acc_elementwise(grads, *x, |k| dy[k] * rv[k % c]);
                if let Some(g) = self.slot(grads, *row) {
                    for (k, &d) in dy.iter().enumerate() {
                        g[k % c] += d * xv[k];
                    }
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc_elementwise(grads, *x, |k| dy[k] * s);
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc_elementwise(grads, *x, |k| dy[k] * y[k] * (T::one() - y[k]));
            }
            Op::Swish(x) => {
                let xv = self.value(*x).data();
                self.acc_elementwise(grads, *x, |k| {
                    let s = sigmoid(xv[k]);
                    dy[k] * (s + xv[k] * s * (T::one() - s))
                });
            }
            Op::Glu(x) => {
                let xv = self.value(*x).data();
                let c = self.value(*x).cols();
                let h = c / 2;
                if let Some(g) = self.slot(grads, *x) {
                    for (r, row) in xv.chunks(c).enumerate() {
                        for j in 0..h {
                            let d = dy[r * h + j];
                            let s = sigmoid(row[h + j]);
                            g[r * c + j] += d * s;
                            g[r * c + h + j] += d * row[j] * s * (T::one() - s);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = out.data();
                let c = out.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for (r, yr) in y.chunks(c).enumerate() {
                        let dr = &dy[r * c..(r + 1) * c];
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            g[r * c + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                if let Some(g) = self.slot(grads, *gain) {
                    for (k, &d) in dy.iter().enumerate() {
                        g[k % c] += d * xhat[k];
                    }
                }
                if let Some(g) = self.slot(grads, *bias) {
                    for (k, &d) in dy.iter().enumerate() {
                        g[k % c] += d;
                    }
                }
                if let Some(g) = self.slot(grads, *x) {
                    let n = T::lit(c as f64);
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let base = r * c;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let dh = dy[base + j] * gv[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[base + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            let dh = dy[base + j] * gv[j];
                            g[base + j] += inv * (dh - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = out.cols();
                let rows = out.rows();
                let gv = self.value(*gain).data();
                if let Some(g) = self.slot(grads, *gain) {
                    for (k, &d) in dy.iter().enumerate() {
                        g[k % c] += d * xhat[k];
                    }
                }
                if let Some(g) = self.slot(grads, *bias) {
                    for (k, &d) in dy.iter().enumerate() {
                        g[k % c] += d;
                    }
                }
                if let Some(g) = self.slot(grads, *x) {
                    if *batch_stats {
                        let n = T::lit(rows as f64);
                        let mut mean_d = vec![T::zero(); c];
                        let mut mean_dx = vec![T::zero(); c];
                        for (k, &d) in dy.iter().enumerate() {
                            let j = k % c;
                            let dh = d * gv[j];
                            mean_d[j] += dh;
                            mean_dx[j] += dh * xhat[k];
                        }
                        for j in 0..c {
                            mean_d[j] /= n;
                            mean_dx[j] /= n;
                        }
                        for (k, &d) in dy.iter().enumerate() {
                            let j = k % c;
                            let dh = d * gv[j];
                            g[k] += inv_std[j] * (dh - mean_d[j] - xhat[k] * mean_dx[j]);
                        }
                    } else {
                        for (k, &d) in dy.iter().enumerate() {
                            let j = k % c;
                            g[k] += d * gv[j] * inv_std[j];
                        }
                    }
                }
            }
            Op::DepthwiseConv(x, kernel) => {
                let (t_len, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k_len = self.shape(*kernel)[0];
                let pad = (k_len - 1) / 2;
                let xs = self.value(*x).data();
                let ks = self.value(*kernel).data();
                if let Some(g) = self.slot(grads, *x) {
                    for t in 0..t_len {
                        for k in 0..k_len {
                            let src_t = t + k;
                            if src_t < pad || src_t - pad >= t_len {
                                continue;
                            }
                            let s = src_t - pad;
                            for j in 0..d {
                                g[s * d + j] += dy[t * d + j] * ks[k * d + j];
                            }
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *kernel) {
                    for t in 0..t_len {
                        for k in 0..k_len {
                            let src_t = t + k;
                            if src_t < pad || src_t - pad >= t_len {
                                continue;
                            }
                            let s = src_t - pad;
                            for j in 0..d {
                                g[k * d + j] += dy[t * d + j] * xs[s * d + j];
                            }
                        }
                    }
                }
            }
            Op::Gather(x, index) => {
                let c = self.value(*x).cols();
                let cols_out = out.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for (p, &j) in index.iter().enumerate() {
                        g[(p / cols_out) * c + j] += dy[p];
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let c = self.value(*x).cols();
                let len = out.cols();
                let start = *start;
                if let Some(g) = self.slot(grads, *x) {
                    for (r, d) in dy.chunks(len).enumerate() {
                        for (j, &v) in d.iter().enumerate() {
                            g[r * c + start + j] += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(g) = self.slot(grads, p) {
                        for (r, d) in dy.chunks(total).enumerate() {
                            for j in 0..w {
                                g[r * w + j] += d[offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let c = out.cols();
                let base = start * c;
                if let Some(g) = self.slot(grads, *x) {
                    for (k, &d) in dy.iter().enumerate() {
                        g[base + k] += d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(g) = self.slot(grads, p) {
                        for k in 0..n {
                            g[k] += dy[offset + k];
                        }
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let d = dy[0];
                self.acc_elementwise(grads, *x, |_| d);
            }
            Op::Mean(x) => {
                let d = dy[0] / T::lit(self.value(*x).len().max(1) as f64);
                self.acc_elementwise(grads, *x, |_| d);
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable in-place softmax of one slice.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    // The denominator is accumulated in double precision so long rows still
    // sum to one within single-precision rounding.
    let mut total = 0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += v.to_f64().unwrap_or(f64::NAN);
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v = T::lit(v.to_f64().unwrap_or(f64::NAN) * inv);
    }
}
