//! Reverse-mode differentiation over a closed set of primitive ops.
//!
//! Every op appends one node to the tape. Node indices are a topological
//! order by construction, so backward is a single reverse sweep.

use super::dense::Tensor;
use super::scalar::{gemm, MatRef, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose { x: Var, perm: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Broadcast(Var),
    Conv1d { x: Var, w: Var, stride: usize, padding: usize },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by [`Tape::batch_norm`]; the biased variance is
/// used for normalization, the unbiased one for running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_biased: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Visits every index of `out_shape` in row-major order, passing the linear
/// output index and the offset into a source laid out with `src_strides`.
fn for_each_strided(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for out in 0..numel {
        f(out, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    col: &mut [T],
) {
    for c in 0..channels {
        let xrow = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let dst = &mut col[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            for (o, d) in dst.iter_mut().enumerate() {
                let pos = (o * stride + k) as isize - padding as isize;
                *d = if pos >= 0 && (pos as usize) < len { xrow[pos as usize] } else { T::zero() };
            }
        }
    }
}

fn col2im_add<T: Scalar>(
    col: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    dx: &mut [T],
) {
    for c in 0..channels {
        for k in 0..kernel {
            let src = &col[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            for (o, &v) in src.iter().enumerate() {
                let pos = (o * stride + k) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    dx[c * len + pos as usize] = dx[c * len + pos as usize] + v;
                }
            }
        }
    }
}

fn stable_sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf. Leaves with `requires_grad` receive a gradient buffer on
    /// every backward pass, zero if the loss does not depend on them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
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

    /// Gradient of the last backward's loss with respect to `v`, if `v`
    /// participates in differentiation.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Hash of every discrete choice made in the forward pass (ReLU masks and
    /// max/argmax selections). Two evaluations with equal signatures lie on
    /// the same smooth piece of a piecewise-smooth function.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01B3;
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    mix(i as u64);
                    for &v in self.nodes[a.0].value.data() {
                        mix(u64::from(v > T::zero()));
                    }
                }
                Op::MaxAxis { argmax, .. } | Op::MaxPool1d { argmax, .. } => {
                    mix(i as u64);
                    argmax.iter().for_each(|&a| mix(a as u64));
                }
                _ => {}
            }
        }
        h
    }

    /// Clears gradient buffers so backward may run again.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shapes(name, &[sa, sb]));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.record(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.record(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.record(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        self.record(out, Op::Scale(a, c), &[a], "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shapes("matmul", &[&sa, &sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        self.record(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.record(out, Op::Relu(a), &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, stable_sigmoid);
        self.record(out, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.ln());
        self.record(out, Op::Log(a), &[a], "log")
    }

    fn last_axis_rows(&self, a: Var) -> (usize, usize) {
        let shape = self.shape(a);
        let cols = *shape.last().expect("rank >= 1");
        (self.value(a).numel() / cols, cols)
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis_rows(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total = total + *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / total);
        }
        let shape = self.shape(a).to_vec();
        self.record(Tensor::from_parts(shape, out), Op::Softmax(a), &[a], "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis_rows(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (d, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.record(Tensor::from_parts(shape, out), Op::LogSoftmax(a), &[a], "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: T = self.value(a).data().iter().copied().sum();
        self.record(Tensor::scalar(total), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let total: T = v.data().iter().copied().sum();
        let out = total / T::from_usize(v.numel());
        self.record(Tensor::scalar(out), Op::Mean(a), &[a], "mean")
    }

    fn check_axis(&self, a: Var, axis: usize, name: &'static str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::invalid(format!("{name}: axis {axis} out of range for shape {:?}", self.shape(a))));
        }
        Ok(())
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> (Vec<usize>, Vec<T>) {
        let shape = self.shape(a);
        let (outer, len, inner) = split_axis(shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        (out_shape, out)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "sum_axis")?;
        let (shape, data) = self.reduce_axis(a, axis);
        self.record(Tensor::from_parts(shape, data), Op::SumAxis { x: a, axis }, &[a], "sum_axis")
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "mean_axis")?;
        let len = self.shape(a)[axis];
        let (shape, mut data) = self.reduce_axis(a, axis);
        let inv = T::one() / T::from_usize(len);
        data.iter_mut().for_each(|v| *v = *v * inv);
        self.record(Tensor::from_parts(shape, data), Op::MeanAxis { x: a, axis }, &[a], "mean_axis")
    }

    /// Max along `axis`, keeping it with size 1. Gradient flows to the first
    /// maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "max_axis")?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = src[best];
                argmax[o * inner + i] = best;
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        self.record(Tensor::from_parts(out_shape, out), Op::MaxAxis { x: a, argmax }, &[a], "max_axis")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let conforms = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !conforms {
                return Err(Error::shapes("concat", &[&base, s]));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat { inputs: inputs.to_vec(), axis };
        self.record(Tensor::from_parts(shape, out), op, inputs, "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.record(out, Op::Reshape(a), &[a], "reshape")
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, axis_a: usize, axis_b: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis_a >= shape.len() || axis_b >= shape.len() {
            return Err(Error::invalid(format!("transpose axes ({axis_a}, {axis_b}) out of range for {shape:?}")));
        }
        let mut perm: Vec<usize> = (0..shape.len()).collect();
        perm.swap(axis_a, axis_b);
        let (out_shape, data) = permute(self.value(a).data(), &shape, &perm);
        let op = Op::Transpose { x: a, perm };
        self.record(Tensor::from_parts(out_shape, data), op, &[a], "transpose")
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis(a, axis, "slice")?;
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[axis] {
            return Err(Error::invalid(format!("slice {start}..{end} out of range on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        self.record(Tensor::from_parts(out_shape, out), Op::Slice { x: a, axis, start }, &[a], "slice")
    }

    /// Expands size-1 axes to `shape`. Ranks must match.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        let ok = src_shape.len() == shape.len()
            && src_shape.iter().zip(shape).all(|(&s, &t)| s == t || s == 1);
        if !ok {
            return Err(Error::shapes("broadcast", &[&src_shape, shape]));
        }
        let strides = broadcast_strides(&src_shape, shape);
        let src = self.value(a).data();
        let numel: usize = shape.iter().product();
        let mut out = vec![T::zero(); numel];
        for_each_strided(shape, &strides, |o, s| out[o] = src[s]);
        self.record(Tensor::from_parts(shape.to_vec(), out), Op::Broadcast(a), &[a], "broadcast")
    }

    /// 1-D cross-correlation. `x: (N, C_in, L)`, `w: (C_out, C_in, K)`, zero
    /// padding on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::shapes("conv1d", &[&sx, &sw]));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d stride must be >= 1"));
        }
        let (n, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if len + 2 * padding < k {
            return Err(Error::invalid(format!(
                "conv1d kernel {k} longer than padded input {}",
                len + 2 * padding
            )));
        }
        let out_len = (len + 2 * padding - k) / stride + 1;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut col = vec![T::zero(); cin * k * out_len];
        let mut out = vec![T::zero(); n * cout * out_len];
        for b in 0..n {
            im2col(&xs[b * cin * len..(b + 1) * cin * len], cin, len, k, stride, padding, out_len, &mut col);
            gemm(
                MatRef::new(ws, cout, cin * k),
                MatRef::new(&col, cin * k, out_len),
                &mut out[b * cout * out_len..(b + 1) * cout * out_len],
                false,
            );
        }
        let value = Tensor::from_parts(vec![n, cout, out_len], out);
        self.record(value, Op::Conv1d { x, w, stride, padding }, &[x, w], "conv1d")
    }

    /// Max pooling over windows of `kernel` with `stride`, no padding.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shapes("max_pool1d", &[&shape]));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("max_pool1d kernel and stride must be >= 1"));
        }
        let (n, c, len) = (shape[0], shape[1], shape[2]);
        if kernel > len {
            return Err(Error::invalid(format!("max_pool1d kernel {kernel} exceeds length {len}")));
        }
        let out_len = (len - kernel) / stride + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_len);
        let mut argmax = Vec::with_capacity(n * c * out_len);
        for row in 0..n * c {
            let base = row * len;
            for o in 0..out_len {
                let start = base + o * stride;
                let mut best = start;
                for idx in start + 1..start + kernel {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::from_parts(vec![n, c, out_len], out);
        self.record(value, Op::MaxPool1d { x, argmax }, &[x], "max_pool1d")
    }

    /// Training-mode batch normalization of `x: (N, C, L)` per channel over
    /// `(N, L)`, followed by the affine map `gamma * xhat + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::shapes("batch_norm", &[&shape, self.shape(gamma), self.shape(beta)]));
        }
        let (n, c, len) = (shape[0], shape[1], shape[2]);
        let count = n * len;
        if count < 2 {
            return Err(Error::invalid("batch_norm in training mode needs at least 2 values per channel"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let cnt = T::from_usize(count);
        let mut stats = BatchStats { mean: vec![T::zero(); c], var_biased: vec![T::zero(); c], var_unbiased: vec![T::zero(); c] };
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for ch in 0..c {
            let mut sum = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * len;
                sum = sum + src[base..base + len].iter().copied().sum::<T>();
            }
            let mean = sum / cnt;
            let mut sq = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * len;
                for &v in &src[base..base + len] {
                    sq = sq + (v - mean) * (v - mean);
                }
            }
            let var = sq / cnt;
            let inv = T::one() / (var + eps).sqrt();
            stats.mean[ch] = mean;
            stats.var_biased[ch] = var;
            stats.var_unbiased[ch] = sq / T::from_usize(count - 1);
            inv_std[ch] = inv;
            for b in 0..n {
                let base = (b * c + ch) * len;
                for i in base..base + len {
                    xhat[i] = (src[i] - mean) * inv;
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std };
        let var = self.record(value, op, &[x, gamma, beta], "batch_norm")?;
        Ok((var, stats))
    }

    /// Mean cross-entropy of `logits: (N, C)` against integer class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shapes("cross_entropy", &[&shape, &[targets.len()]]));
        }
        let (n, classes) = (shape[0], shape[1]);
        let mut onehot = vec![T::zero(); n * classes];
        for (row, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::invalid(format!("target class {t} out of range for {classes} classes")));
            }
            onehot[row * classes + t] = T::one();
        }
        let onehot = self.constant(Tensor::from_parts(shape, onehot))?;
        let lsm = self.log_softmax(logits)?;
        let picked = self.mul(lsm, onehot)?;
        let total = self.sum(picked)?;
        self.scale(total, -T::one() / T::from_usize(n))
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            self.fill_leaf_zeros();
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        self.fill_leaf_zeros();
        Ok(())
    }

    fn fill_leaf_zeros(&mut self) {
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]);
        f(buf, &self.nodes);
    }

    fn propagate(&mut self, index: usize, g: &[T]) {
        // The op is cloned out so that saved buffers can be read while the
        // input gradient buffers are borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[index].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, |buf, _| add_into(buf, g));
                self.accumulate(*b, |buf, _| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |buf, _| add_into(buf, g));
                self.accumulate(*b, |buf, _| buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |buf, nodes| {
                    let other = nodes[b.0].value.data();
                    for ((d, &gv), &o) in buf.iter_mut().zip(g).zip(other) {
                        *d = *d + gv * o;
                    }
                });
                self.accumulate(b, |buf, nodes| {
                    let other = nodes[a.0].value.data();
                    for ((d, &gv), &o) in buf.iter_mut().zip(g).zip(other) {
                        *d = *d + gv * o;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, |buf, _| buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * c));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.accumulate(a, |buf, nodes| {
                    let bv = nodes[b.0].value.data();
                    gemm(MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), buf, true);
                });
                self.accumulate(b, |buf, nodes| {
                    let av = nodes[a.0].value.data();
                    gemm(MatRef::new(av, m, k).t(), MatRef::new(g, m, n), buf, true);
                });
            }
            Op::Relu(a) => {
                let a = *a;
                self.accumulate(a, |buf, nodes| {
                    let x = nodes[a.0].value.data();
                    for ((d, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[index].value.data().to_vec();
                self.accumulate(*a, |buf, _| {
                    for ((d, &gv), &yv) in buf.iter_mut().zip(g).zip(&y) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::Log(a) => {
                let a = *a;
                self.accumulate(a, |buf, nodes| {
                    let x = nodes[a.0].value.data();
                    for ((d, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *d = *d + gv / xv;
                    }
                });
            }
            Op::Softmax(a) => {
                let (rows, cols) = self.last_axis_rows(*a);
                let y = self.nodes[index].value.data().to_vec();
                self.accumulate(*a, |buf, _| {
                    for r in 0..rows {
                        let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: T = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..cols {
                            buf[r * cols + c] = buf[r * cols + c] + ys[c] * (gs[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = self.last_axis_rows(*a);
                let y = self.nodes[index].value.data().to_vec();
                self.accumulate(*a, |buf, _| {
                    for r in 0..rows {
                        let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let total: T = gs.iter().copied().sum();
                        for c in 0..cols {
                            buf[r * cols + c] = buf[r * cols + c] + gs[c] - ys[c].exp() * total;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(*a, |buf, _| buf.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / T::from_usize(self.value(*a).numel());
                self.accumulate(*a, |buf, _| buf.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let factor = if matches!(op, Op::MeanAxis { .. }) { T::one() / T::from_usize(len) } else { T::one() };
                self.accumulate(*x, |buf, _| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                buf[base + i] = buf[base + i] + g[o * inner + i] * factor;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, argmax } | Op::MaxPool1d { x, argmax } => {
                self.accumulate(*x, |buf, _| {
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        buf[idx] = buf[idx] + gv;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[index].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    self.accumulate(v, |buf, _| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut buf[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                self.accumulate(*a, |buf, _| add_into(buf, g));
            }
            Op::Transpose { x, perm } => {
                let out_shape = self.nodes[index].value.shape().to_vec();
                // a swap permutation is its own inverse
                let (_, back) = permute(g, &out_shape, perm);
                self.accumulate(*x, |buf, _| add_into(buf, &back));
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&in_shape, *axis);
                let width = self.nodes[index].value.shape()[*axis];
                let start = *start;
                self.accumulate(*x, |buf, _| {
                    for o in 0..outer {
                        let dst = &mut buf[(o * len + start) * inner..(o * len + start + width) * inner];
                        add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                    }
                });
            }
            Op::Broadcast(a) => {
                let src_shape = self.shape(*a).to_vec();
                let out_shape = self.nodes[index].value.shape().to_vec();
                let strides = broadcast_strides(&src_shape, &out_shape);
                self.accumulate(*a, |buf, _| {
                    for_each_strided(&out_shape, &strides, |o, s| buf[s] = buf[s] + g[o]);
                });
            }
            Op::Conv1d { x, w, stride, padding } => {
                self.conv1d_backward(*x, *w, *stride, *padding, g);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let shape = self.shape(*x).to_vec();
                let (n, c, len) = (shape[0], shape[1], shape[2]);
                let count = T::from_usize(n * len);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * len;
                        for i in base..base + len {
                            sum_g[ch] = sum_g[ch] + g[i];
                            sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(*beta, |buf, _| add_into(buf, &sum_g));
                self.accumulate(*gamma, |buf, _| add_into(buf, &sum_gx));
                let gamma = *gamma;
                self.accumulate(*x, |buf, nodes| {
                    let gv = nodes[gamma.0].value.data();
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = gv[ch] * inv_std[ch] / count;
                            let base = (b * c + ch) * len;
                            for i in base..base + len {
                                let term = count * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch];
                                buf[i] = buf[i] + scale * term;
                            }
                        }
                    }
                });
            }
        }
        self.nodes[index].op = op;
    }

    fn conv1d_backward(&mut self, x: Var, w: Var, stride: usize, padding: usize, g: &[T]) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let out_len = (len + 2 * padding - k) / stride + 1;
        let need_w = self.nodes[w.0].requires_grad;
        let need_x = self.nodes[x.0].requires_grad;
        let mut col = vec![T::zero(); cin * k * out_len];
        if need_w {
            let xs = self.nodes[x.0].value.data().to_vec();
            let dw = self.grad_buf(w).expect("requires grad");
            for b in 0..n {
                im2col(&xs[b * cin * len..(b + 1) * cin * len], cin, len, k, stride, padding, out_len, &mut col);
                gemm(
                    MatRef::new(&g[b * cout * out_len..(b + 1) * cout * out_len], cout, out_len),
                    MatRef::new(&col, cin * k, out_len).t(),
                    dw,
                    true,
                );
            }
        }
        if need_x {
            let ws = self.nodes[w.0].value.data().to_vec();
            let dx = self.grad_buf(x).expect("requires grad");
            for b in 0..n {
                gemm(
                    MatRef::new(&ws, cout, cin * k).t(),
                    MatRef::new(&g[b * cout * out_len..(b + 1) * cout * out_len], cout, out_len),
                    &mut col,
                    false,
                );
                col2im_add(&col, cin, len, k, stride, padding, out_len, &mut dx[b * cin * len..(b + 1) * cin * len]);
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn broadcast_strides(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(src_shape);
    src_shape
        .iter()
        .zip(out_shape)
        .zip(strides)
        .map(|((&s, &t), st)| if s == 1 && t != 1 { 0 } else { st })
        .collect()
}

fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = vec![T::zero(); data.len()];
    for_each_strided(&out_shape, &src_strides, |o, s| out[o] = data[s]);
    (out_shape, out)
}
