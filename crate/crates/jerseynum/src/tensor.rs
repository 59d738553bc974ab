//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Tape`] records forward operations into a topologically ordered list of
//! nodes; [`Tape::backward`] replays the list in reverse, accumulating
//! gradients into every node that (transitively) depends on a
//! `requires_grad` leaf. The op set is exactly what the three-head
//! classifier needs: conv2d, maxpool, relu, linear, softmax, global average
//! pooling, residual add, fused cross-entropy, and scalar combination.
//!
//! Kernels are scalar loops ordered for contiguous inner access and may
//! parallelize across independent output planes; every output element is
//! produced by a single task with a fixed sequential reduction order, so
//! results are bit-identical for any thread count.

use std::fmt;

use num_traits::Float;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// Storage precision tag, persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Scalar element type: f64 for verification and gradient checking, f32 for
/// training throughput.
pub trait Element:
    Float + Copy + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

// ── Tensor values ────────────────────────────────────────────────────

/// A plain dense tensor value (no gradient state). Gradient-tracked tensors
/// live as nodes on a [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op<E: Element> {
    Leaf,
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: ValueId,
        /// Flat input index of each output element's argmax (ties: lowest).
        argmax: Vec<usize>,
    },
    Relu {
        input: ValueId,
    },
    Linear {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    },
    Add {
        lhs: ValueId,
        rhs: ValueId,
    },
    Mul {
        lhs: ValueId,
        rhs: ValueId,
    },
    Scale {
        input: ValueId,
        factor: E,
    },
    GlobalAvgPool {
        input: ValueId,
    },
    Softmax {
        input: ValueId,
    },
    CrossEntropyMean {
        logits: ValueId,
        targets: Vec<usize>,
    },
    WeightedSum {
        terms: Vec<(ValueId, E)>,
    },
    ReduceWeighted {
        input: ValueId,
        weights: Vec<E>,
    },
    Sum {
        input: ValueId,
    },
}

struct Node<E: Element> {
    data: Vec<E>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
    op: Op<E>,
}

/// An executed forward computation: an append-only, topologically ordered
/// record of operations. Backward may run once per tape.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    backward_done: bool,
    parallel_kernels: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
            parallel_kernels: true,
        }
    }

    /// A tape whose kernels stay single-threaded; used when whole tapes
    /// already run in parallel (results are identical either way).
    pub fn serial() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
            parallel_kernels: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Only leaves may require gradients directly;
    /// interior nodes inherit the flag from their inputs.
    pub fn leaf(&mut self, value: &Tensor<E>, requires_grad: bool) -> ValueId {
        self.push(value.data.clone(), value.shape.clone(), requires_grad, Op::Leaf)
    }

    pub fn leaf_owned(&mut self, value: Tensor<E>, requires_grad: bool) -> ValueId {
        self.push(value.data, value.shape, requires_grad, Op::Leaf)
    }

    fn push(&mut self, data: Vec<E>, shape: Vec<usize>, requires_grad: bool, op: Op<E>) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    pub fn data(&self, id: ValueId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: ValueId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn value(&self, id: ValueId) -> Tensor<E> {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
        }
    }

    pub fn scalar_value(&self, id: ValueId) -> Result<E, TensorError> {
        let node = &self.nodes[id.0];
        if node.data.len() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "expected scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.data[0])
    }

    fn needs_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// 2-D cross-correlation with zero padding: input `[N,C,H,W]`, kernel
    /// `[F,C,kh,kw]`, bias `[F]` -> `[N,F,H',W']`.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId, TensorError> {
        if stride < 1 {
            return Err(TensorError::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        let bs = self.shape(bias);
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TensorError::InvalidShape(format!(
                "conv2d: need 4-d input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(TensorError::InvalidShape(format!(
                "conv2d: input has {c} channels but kernel expects {kc}"
            )));
        }
        if bs != [f] {
            return Err(TensorError::InvalidShape(format!(
                "conv2d: bias shape {bs:?} does not match {f} filters"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::InvalidShape(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let x = &self.nodes[input.0].data;
        let k = &self.nodes[kernel.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![E::zero(); n * f * oh * ow];

        // Zero-padded copies of the input planes let the stride-1 kernel run
        // full-width row FMAs with no bounds logic.
        let xpad = pad_planes(x, n * c, h, w, padding);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);

        let plane = oh * ow;
        let run = |plane_idx: usize, out_plane: &mut [E]| {
            let ni = plane_idx / f;
            let fi = plane_idx % f;
            out_plane.fill(b[fi]);
            for ci in 0..c {
                let xp = &xpad[(ni * c + ci) * ph * pw..][..ph * pw];
                let ker = &k[(fi * c + ci) * kh * kw..][..kh * kw];
                if stride == 1 {
                    conv_plane_accum_s1(out_plane, xp, ker, pw, kh, kw, oh, ow);
                } else {
                    conv_plane_accum_strided(out_plane, xp, ker, pw, kh, kw, oh, ow, stride);
                }
            }
        };
        if self.parallel_kernels && n * f * plane >= PAR_THRESHOLD && n * f > 1 {
            out.par_chunks_mut(plane).enumerate().for_each(|(i, ch)| run(i, ch));
        } else {
            out.chunks_mut(plane).enumerate().for_each(|(i, ch)| run(i, ch));
        }

        let requires = self.needs_grad(&[input, kernel, bias]);
        Ok(self.push(
            out,
            vec![n, f, oh, ow],
            requires,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Max pooling over `k`x`k` windows. Backward routes each window's
    /// gradient to its argmax only (ties break to the lowest flat index).
    pub fn maxpool2d(&mut self, input: ValueId, k: usize, stride: usize) -> Result<ValueId, TensorError> {
        if k == 0 {
            return Err(TensorError::InvalidArgument("maxpool2d: k must be >= 1".into()));
        }
        if stride < 1 {
            return Err(TensorError::InvalidArgument("maxpool2d: stride must be >= 1".into()));
        }
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape(format!(
                "maxpool2d: need 4-d input, got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k > h || k > w {
            return Err(TensorError::InvalidShape(format!(
                "maxpool2d: window {k} exceeds input {h}x{w}"
            )));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;

        let x = &self.nodes[input.0].data;
        let mut out = vec![E::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for p in 0..n * c {
            let x_plane = &x[p * h * w..][..h * w];
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let iy0 = oy * stride;
                    let ix0 = ox * stride;
                    let mut best = x_plane[iy0 * w + ix0];
                    let mut best_idx = iy0 * w + ix0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (iy0 + dy) * w + ix0 + dx;
                            if x_plane[idx] > best {
                                best = x_plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[p * oh * ow + oy * ow + ox] = best;
                    argmax[p * oh * ow + oy * ow + ox] = base + best_idx;
                }
            }
        }

        let requires = self.needs_grad(&[input]);
        Ok(self.push(out, vec![n, c, oh, ow], requires, Op::MaxPool2d { input, argmax }))
    }

    /// Elementwise max(x, 0). Backward passes gradient where x > 0.
    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let x = &self.nodes[input.0].data;
        let out: Vec<E> = x.iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect();
        let shape = self.nodes[input.0].shape.clone();
        let requires = self.needs_grad(&[input]);
        self.push(out, shape, requires, Op::Relu { input })
    }

    /// Affine map: input `[N,D]` x weight `[D,K]` + bias `[K]` -> `[N,K]`.
    pub fn linear(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    ) -> Result<ValueId, TensorError> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if xs.len() != 2 || ws.len() != 2 {
            return Err(TensorError::InvalidShape(format!(
                "linear: need 2-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, d) = (xs[0], xs[1]);
        let (wd, k) = (ws[0], ws[1]);
        if wd != d {
            return Err(TensorError::InvalidShape(format!(
                "linear: input dim {d} does not match weight dim {wd}"
            )));
        }
        if bs != [k] {
            return Err(TensorError::InvalidShape(format!(
                "linear: bias shape {bs:?} does not match {k} outputs"
            )));
        }

        let x = &self.nodes[input.0].data;
        let w = &self.nodes[weight.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![E::zero(); n * k];
        for ni in 0..n {
            let row = &mut out[ni * k..][..k];
            row.copy_from_slice(b);
            let xrow = &x[ni * d..][..d];
            for (di, &xv) in xrow.iter().enumerate() {
                let wrow = &w[di * k..][..k];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }

        let requires = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(out, vec![n, k], requires, Op::Linear { input, weight, bias }))
    }

    /// Elementwise sum of two same-shape tensors (residual connections).
    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(TensorError::InvalidShape(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let a = &self.nodes[lhs.0].data;
        let b = &self.nodes[rhs.0].data;
        let out: Vec<E> = a.iter().zip(b).map(|(&x, &y)| x + y).collect();
        let shape = self.nodes[lhs.0].shape.clone();
        let requires = self.needs_grad(&[lhs, rhs]);
        Ok(self.push(out, shape, requires, Op::Add { lhs, rhs }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(TensorError::InvalidShape(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let a = &self.nodes[lhs.0].data;
        let b = &self.nodes[rhs.0].data;
        let out: Vec<E> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
        let shape = self.nodes[lhs.0].shape.clone();
        let requires = self.needs_grad(&[lhs, rhs]);
        Ok(self.push(out, shape, requires, Op::Mul { lhs, rhs }))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, input: ValueId, factor: E) -> ValueId {
        let out: Vec<E> = self.nodes[input.0].data.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[input.0].shape.clone();
        let requires = self.needs_grad(&[input]);
        self.push(out, shape, requires, Op::Scale { input, factor })
    }

    /// Mean over the spatial dims: `[N,C,H,W]` -> `[N,C]`.
    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape(format!(
                "global_avg_pool: need 4-d input, got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let x = &self.nodes[input.0].data;
        let inv = E::from_f64(1.0 / (h * w) as f64);
        let mut out = vec![E::zero(); n * c];
        for p in 0..n * c {
            let s: E = x[p * h * w..][..h * w].iter().copied().sum();
            out[p] = s * inv;
        }
        let requires = self.needs_grad(&[input]);
        Ok(self.push(out, vec![n, c], requires, Op::GlobalAvgPool { input }))
    }

    /// Row softmax over `[N,K]`, computed with max subtraction.
    pub fn softmax(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let xs = self.shape(input);
        if xs.len() != 2 || xs[1] == 0 {
            return Err(TensorError::InvalidShape(format!(
                "softmax: need 2-d input with K >= 1, got {xs:?}"
            )));
        }
        let (n, k) = (xs[0], xs[1]);
        let x = &self.nodes[input.0].data;
        let mut out = vec![E::zero(); n * k];
        for ni in 0..n {
            let row = &x[ni * k..][..k];
            let orow = &mut out[ni * k..][..k];
            softmax_row(row, orow);
        }
        let requires = self.needs_grad(&[input]);
        Ok(self.push(out, vec![n, k], requires, Op::Softmax { input }))
    }

    /// Mean cross-entropy between row-softmax of `logits` `[N,K]` and integer
    /// `targets`, fused through log-sum-exp for stability. Returns a scalar.
    pub fn cross_entropy_mean(
        &mut self,
        logits: ValueId,
        targets: &[usize],
    ) -> Result<ValueId, TensorError> {
        let xs = self.shape(logits);
        if xs.len() != 2 {
            return Err(TensorError::InvalidShape(format!(
                "cross_entropy_mean: need 2-d logits, got {xs:?}"
            )));
        }
        let (n, k) = (xs[0], xs[1]);
        if targets.len() != n {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy_mean: {n} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy_mean: target {t} out of range for {k} classes"
            )));
        }
        let x = &self.nodes[logits.0].data;
        let mut total = E::zero();
        for (ni, &t) in targets.iter().enumerate() {
            let row = &x[ni * k..][..k];
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let lse: E = row.iter().map(|&v| (v - m).exp()).sum();
            total = total + (m + lse.ln() - row[t]);
        }
        let mean = total / E::from_f64(n as f64);
        let requires = self.needs_grad(&[logits]);
        Ok(self.push(
            vec![mean],
            vec![],
            requires,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Weighted sum of scalar values. Zero-weight terms contribute nothing
    /// to forward or backward, which keeps gated heads' gradients exactly 0.
    pub fn weighted_sum(&mut self, terms: &[(ValueId, E)]) -> Result<ValueId, TensorError> {
        if terms.is_empty() {
            return Err(TensorError::InvalidArgument("weighted_sum: no terms".into()));
        }
        let mut total = E::zero();
        for &(id, w) in terms {
            let v = self.scalar_value(id)?;
            total = total + w * v;
        }
        let requires = self.needs_grad(&terms.iter().map(|&(id, _)| id).collect::<Vec<_>>());
        Ok(self.push(
            vec![total],
            vec![],
            requires,
            Op::WeightedSum { terms: terms.to_vec() },
        ))
    }

    /// Scalar inner product with a constant coefficient vector.
    pub fn reduce_weighted(&mut self, input: ValueId, weights: &[E]) -> Result<ValueId, TensorError> {
        let x = &self.nodes[input.0].data;
        if x.len() != weights.len() {
            return Err(TensorError::InvalidArgument(format!(
                "reduce_weighted: {} elements but {} weights",
                x.len(),
                weights.len()
            )));
        }
        let total: E = x.iter().zip(weights).map(|(&v, &w)| v * w).sum();
        let requires = self.needs_grad(&[input]);
        Ok(self.push(
            vec![total],
            vec![],
            requires,
            Op::ReduceWeighted {
                input,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: ValueId) -> ValueId {
        let total: E = self.nodes[input.0].data.iter().copied().sum();
        let requires = self.needs_grad(&[input]);
        self.push(vec![total], vec![], requires, Op::Sum { input })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulates d`loss`/d`node` into every node that requires a gradient.
    /// `loss` must be scalar; a second call on the same tape is rejected.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::State(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.len() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss_node.shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            // Take op and grad out to appease the borrow checker; both are
            // restored untouched below.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let grad = self.nodes[i].grad.take().unwrap();
            self.apply_backward(i, &op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: ValueId) -> &mut [E] {
        let node = &mut self.nodes[id.0];
        let n = node.data.len();
        node.grad.get_or_insert_with(|| vec![E::zero(); n])
    }

    fn apply_backward(&mut self, node_idx: usize, op: &Op<E>, grad: &[E]) {
        match op {
            Op::Leaf => {}

            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (stride, padding) = (*stride, *padding);
                let xs = self.nodes[input.0].shape.clone();
                let ks = self.nodes[kernel.0].shape.clone();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (f, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let os = &self.nodes[node_idx].shape;
                let (oh, ow) = (os[2], os[3]);

                let (ph, pw) = (h + 2 * padding, w + 2 * padding);

                if self.nodes[input.0].requires_grad {
                    let kdata = &self.nodes[kernel.0].data;
                    let pplane = ph * pw;
                    let mut dxpad = vec![E::zero(); n * c * pplane];
                    let run = |p: usize, dxp: &mut [E]| {
                        let ni = p / c;
                        let ci = p % c;
                        for fi in 0..f {
                            let g_plane = &grad[(ni * f + fi) * oh * ow..][..oh * ow];
                            let ker = &kdata[(fi * c + ci) * kh * kw..][..kh * kw];
                            conv_plane_input_grad(dxp, g_plane, ker, pw, kh, kw, oh, ow, stride);
                        }
                    };
                    if self.parallel_kernels && n * c * pplane >= PAR_THRESHOLD && n * c > 1 {
                        dxpad.par_chunks_mut(pplane).enumerate().for_each(|(p, ch)| run(p, ch));
                    } else {
                        dxpad.chunks_mut(pplane).enumerate().for_each(|(p, ch)| run(p, ch));
                    }
                    // Crop the padding margin back off.
                    let target = self.ensure_grad(*input);
                    for p in 0..n * c {
                        let src = &dxpad[p * pplane..][..pplane];
                        let dst = &mut target[p * h * w..][..h * w];
                        for y in 0..h {
                            let srow = &src[(y + padding) * pw + padding..][..w];
                            let drow = &mut dst[y * w..][..w];
                            for (d, &s) in drow.iter_mut().zip(srow) {
                                *d = *d + s;
                            }
                        }
                    }
                }

                if self.nodes[kernel.0].requires_grad {
                    let xpad = pad_planes(&self.nodes[input.0].data, n * c, h, w, padding);
                    let mut dk = vec![E::zero(); f * c * kh * kw];
                    let kplane = c * kh * kw;
                    let run = |fi: usize, dk_f: &mut [E]| {
                        for ni in 0..n {
                            let g_plane = &grad[(ni * f + fi) * oh * ow..][..oh * ow];
                            for ci in 0..c {
                                let xp = &xpad[(ni * c + ci) * ph * pw..][..ph * pw];
                                conv_plane_kernel_grad(
                                    &mut dk_f[ci * kh * kw..][..kh * kw],
                                    xp,
                                    g_plane,
                                    pw,
                                    kh,
                                    kw,
                                    oh,
                                    ow,
                                    stride,
                                );
                            }
                        }
                    };
                    if self.parallel_kernels && f > 1 && n * f * oh * ow >= PAR_THRESHOLD {
                        dk.par_chunks_mut(kplane).enumerate().for_each(|(fi, ch)| run(fi, ch));
                    } else {
                        dk.chunks_mut(kplane).enumerate().for_each(|(fi, ch)| run(fi, ch));
                    }
                    accumulate(self.ensure_grad(*kernel), &dk);
                }

                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![E::zero(); f];
                    for ni in 0..n {
                        for (fi, d) in db.iter_mut().enumerate() {
                            let g_plane = &grad[(ni * f + fi) * oh * ow..][..oh * ow];
                            *d = *d + g_plane.iter().copied().sum();
                        }
                    }
                    accumulate(self.ensure_grad(*bias), &db);
                }
            }

            Op::MaxPool2d { input, argmax } => {
                if self.nodes[input.0].requires_grad {
                    let n = self.nodes[input.0].data.len();
                    let mut dx = vec![E::zero(); n];
                    for (&src, &g) in argmax.iter().zip(grad) {
                        dx[src] = dx[src] + g;
                    }
                    accumulate(self.ensure_grad(*input), &dx);
                }
            }

            Op::Relu { input } => {
                if self.nodes[input.0].requires_grad {
                    let dx: Vec<E> = self.nodes[input.0]
                        .data
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| if x > E::zero() { g } else { E::zero() })
                        .collect();
                    accumulate(self.ensure_grad(*input), &dx);
                }
            }

            Op::Linear { input, weight, bias } => {
                let xs = &self.nodes[input.0].shape;
                let (n, d) = (xs[0], xs[1]);
                let k = self.nodes[weight.0].shape[1];

                if self.nodes[input.0].requires_grad {
                    let w = &self.nodes[weight.0].data;
                    let mut dx = vec![E::zero(); n * d];
                    for ni in 0..n {
                        let grow = &grad[ni * k..][..k];
                        let dxrow = &mut dx[ni * d..][..d];
                        for (di, dv) in dxrow.iter_mut().enumerate() {
                            let wrow = &w[di * k..][..k];
                            *dv = grow.iter().zip(wrow).map(|(&g, &wv)| g * wv).sum();
                        }
                    }
                    accumulate(self.ensure_grad(*input), &dx);
                }

                if self.nodes[weight.0].requires_grad {
                    let x = &self.nodes[input.0].data;
                    let mut dw = vec![E::zero(); d * k];
                    for ni in 0..n {
                        let grow = &grad[ni * k..][..k];
                        let xrow = &x[ni * d..][..d];
                        for (di, &xv) in xrow.iter().enumerate() {
                            let dwrow = &mut dw[di * k..][..k];
                            for (dv, &g) in dwrow.iter_mut().zip(grow) {
                                *dv = *dv + xv * g;
                            }
                        }
                    }
                    accumulate(self.ensure_grad(*weight), &dw);
                }

                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![E::zero(); k];
                    for ni in 0..n {
                        let grow = &grad[ni * k..][..k];
                        for (dv, &g) in db.iter_mut().zip(grow) {
                            *dv = *dv + g;
                        }
                    }
                    accumulate(self.ensure_grad(*bias), &db);
                }
            }

            Op::Add { lhs, rhs } => {
                if self.nodes[lhs.0].requires_grad {
                    accumulate(self.ensure_grad(*lhs), grad);
                }
                if self.nodes[rhs.0].requires_grad {
                    accumulate(self.ensure_grad(*rhs), grad);
                }
            }

            Op::Mul { lhs, rhs } => {
                if self.nodes[lhs.0].requires_grad {
                    let da: Vec<E> = self.nodes[rhs.0]
                        .data
                        .iter()
                        .zip(grad)
                        .map(|(&b, &g)| b * g)
                        .collect();
                    accumulate(self.ensure_grad(*lhs), &da);
                }
                if self.nodes[rhs.0].requires_grad {
                    let db: Vec<E> = self.nodes[lhs.0]
                        .data
                        .iter()
                        .zip(grad)
                        .map(|(&a, &g)| a * g)
                        .collect();
                    accumulate(self.ensure_grad(*rhs), &db);
                }
            }

            Op::Scale { input, factor } => {
                if self.nodes[input.0].requires_grad {
                    let f = *factor;
                    let dx: Vec<E> = grad.iter().map(|&g| g * f).collect();
                    accumulate(self.ensure_grad(*input), &dx);
                }
            }

            Op::GlobalAvgPool { input } => {
                if self.nodes[input.0].requires_grad {
                    let xs = &self.nodes[input.0].shape;
                    let (h, w) = (xs[2], xs[3]);
                    let inv = E::from_f64(1.0 / (h * w) as f64);
                    let mut dx = vec![E::zero(); self.nodes[input.0].data.len()];
                    for (p, &g) in grad.iter().enumerate() {
                        let v = g * inv;
                        for d in dx[p * h * w..][..h * w].iter_mut() {
                            *d = v;
                        }
                    }
                    accumulate(self.ensure_grad(*input), &dx);
                }
            }

            Op::Softmax { input } => {
                if self.nodes[input.0].requires_grad {
                    let s = &self.nodes[node_idx].data;
                    let xs = &self.nodes[input.0].shape;
                    let (n, k) = (xs[0], xs[1]);
                    let mut dx = vec![E::zero(); n * k];
                    for ni in 0..n {
                        let srow = &s[ni * k..][..k];
                        let grow = &grad[ni * k..][..k];
                        let dot: E = srow.iter().zip(grow).map(|(&sv, &g)| sv * g).sum();
                        let drow = &mut dx[ni * k..][..k];
                        for ((d, &sv), &g) in drow.iter_mut().zip(srow).zip(grow) {
                            *d = sv * (g - dot);
                        }
                    }
                    accumulate(self.ensure_grad(*input), &dx);
                }
            }

            Op::CrossEntropyMean { logits, targets } => {
                if self.nodes[logits.0].requires_grad {
                    let x = &self.nodes[logits.0].data;
                    let xs = &self.nodes[logits.0].shape;
                    let (n, k) = (xs[0], xs[1]);
                    let scale = grad[0] / E::from_f64(n as f64);
                    let mut dx = vec![E::zero(); n * k];
                    let mut srow = vec![E::zero(); k];
                    for (ni, &t) in targets.iter().enumerate() {
                        let row = &x[ni * k..][..k];
                        softmax_row(row, &mut srow);
                        let drow = &mut dx[ni * k..][..k];
                        for (j, (d, &sv)) in drow.iter_mut().zip(&srow).enumerate() {
                            let ind = if j == t { E::one() } else { E::zero() };
                            *d = (sv - ind) * scale;
                        }
                    }
                    accumulate(self.ensure_grad(*logits), &dx);
                }
            }

            Op::WeightedSum { terms } => {
                let g = grad[0];
                for &(id, w) in terms {
                    if w != E::zero() && self.nodes[id.0].requires_grad {
                        let slot = self.ensure_grad(id);
                        slot[0] = slot[0] + w * g;
                    }
                }
            }

            Op::ReduceWeighted { input, weights } => {
                if self.nodes[input.0].requires_grad {
                    let g = grad[0];
                    let dx: Vec<E> = weights.iter().map(|&w| w * g).collect();
                    accumulate(self.ensure_grad(*input), &dx);
                }
            }

            Op::Sum { input } => {
                if self.nodes[input.0].requires_grad {
                    let g = grad[0];
                    let n = self.nodes[input.0].data.len();
                    accumulate(self.ensure_grad(*input), &vec![g; n]);
                }
            }
        }
    }
}

/// Work threshold below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 14;

fn accumulate<E: Element>(target: &mut [E], src: &[E]) {
    for (t, &s) in target.iter_mut().zip(src) {
        *t = *t + s;
    }
}

fn softmax_row<E: Element>(row: &[E], out: &mut [E]) {
    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = E::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Copies `planes` H x W planes into zero-padded (H+2p) x (W+2p) buffers.
fn pad_planes<E: Element>(x: &[E], planes: usize, h: usize, w: usize, padding: usize) -> Vec<E> {
    if padding == 0 {
        return x.to_vec();
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut out = vec![E::zero(); planes * ph * pw];
    let run = |p: usize, dst: &mut [E]| {
        let src = &x[p * h * w..][..h * w];
        for y in 0..h {
            dst[(y + padding) * pw + padding..][..w].copy_from_slice(&src[y * w..][..w]);
        }
    };
    if planes * ph * pw >= PAR_THRESHOLD && planes > 1 {
        out.par_chunks_mut(ph * pw).enumerate().for_each(|(p, ch)| run(p, ch));
    } else {
        out.chunks_mut(ph * pw).enumerate().for_each(|(p, ch)| run(p, ch));
    }
    out
}

/// Stride-1 correlation of one padded input plane into one output plane:
/// every tap is a full-width row FMA.
fn conv_plane_accum_s1<E: Element>(
    out: &mut [E],
    xpad: &[E],
    ker: &[E],
    pw: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let kv = ker[ky * kw + kx];
            for oy in 0..oh {
                let xrow = &xpad[(oy + ky) * pw + kx..][..ow];
                let orow = &mut out[oy * ow..][..ow];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o = *o + kv * xv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_plane_accum_strided<E: Element>(
    out: &mut [E],
    xpad: &[E],
    ker: &[E],
    pw: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let kv = ker[ky * kw + kx];
            for oy in 0..oh {
                let xrow = &xpad[(oy * stride + ky) * pw + kx..];
                let orow = &mut out[oy * ow..][..ow];
                for (ox, o) in orow.iter_mut().enumerate() {
                    *o = *o + kv * xrow[ox * stride];
                }
            }
        }
    }
}

/// Scatters an output-plane gradient back into a padded input-gradient plane.
#[allow(clippy::too_many_arguments)]
fn conv_plane_input_grad<E: Element>(
    dxpad: &mut [E],
    g: &[E],
    ker: &[E],
    pw: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let kv = ker[ky * kw + kx];
            for oy in 0..oh {
                let grow = &g[oy * ow..][..ow];
                if stride == 1 {
                    let drow = &mut dxpad[(oy + ky) * pw + kx..][..ow];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d = *d + kv * gv;
                    }
                } else {
                    let base = (oy * stride + ky) * pw + kx;
                    for (ox, &gv) in grow.iter().enumerate() {
                        let idx = base + ox * stride;
                        dxpad[idx] = dxpad[idx] + kv * gv;
                    }
                }
            }
        }
    }
}

/// Accumulates the kernel gradient for one (filter, channel) pair from a
/// padded input plane.
#[allow(clippy::too_many_arguments)]
fn conv_plane_kernel_grad<E: Element>(
    dk: &mut [E],
    xpad: &[E],
    g: &[E],
    pw: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let mut acc = E::zero();
            for oy in 0..oh {
                let grow = &g[oy * ow..][..ow];
                if stride == 1 {
                    let xrow = &xpad[(oy + ky) * pw + kx..][..ow];
                    acc = acc + grow.iter().zip(xrow).map(|(&gv, &xv)| gv * xv).sum();
                } else {
                    let base = (oy * stride + ky) * pw + kx;
                    for (ox, &gv) in grow.iter().enumerate() {
                        acc = acc + gv * xpad[base + ox * stride];
                    }
                }
            }
            dk[ky * kw + kx] = dk[ky * kw + kx] + acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let numel = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Direct nested-loop correlation, independent of the tape kernels.
    fn conv_oracle(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[fi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w
                                    {
                                        acc += x.data()[((ni * c + ci) * h + iy as usize) * w
                                            + ix as usize]
                                            * k.data()[((fi * c + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 1, 2, 2], &[1.0; 4]), false);
        let k = tape.leaf(&tensor(&[1, 1, 2, 2], &[1.0; 4]), false);
        let b = tape.leaf(&tensor(&[1], &[0.0]), false);
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[4.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = random_tensor(&[2, 1, 4, 5], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(&xt, false);
        let k = tape.leaf(&tensor(&[1, 1, 1, 1], &[1.0]), false);
        let b = tape.leaf(&tensor(&[1], &[0.0]), false);
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.data(y), xt.data());
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = random_tensor(&[2, 3, 5, 5], &mut rng);
        let kt = random_tensor(&[4, 3, 3, 3], &mut rng);
        let bt = random_tensor(&[4], &mut rng);
        let expected = conv_oracle(&xt, &kt, bt.data(), 2, 1);

        let mut tape = Tape::new();
        let x = tape.leaf(&xt, false);
        let k = tape.leaf(&kt, false);
        let b = tape.leaf(&bt, false);
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 3, 3]);
        for (got, want) in tape.data(y).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn conv2d_channel_mismatch_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 2, 4, 4]), false);
        let k = tape.leaf(&Tensor::zeros(vec![1, 3, 3, 3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![1]), false);
        assert!(matches!(
            tape.conv2d(x, k, b, 1, 0),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn maxpool_basic_and_tie_break() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.data(y), &[4.0]);

        // Constant input: output constant, gradient goes to the first
        // (lowest flat index) element of the window.
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 1, 2, 2], &[5.0; 4]), true);
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.data(y), &[5.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_window_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = random_tensor(&[1, 2, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(&xt, false);
        let y = tape.maxpool2d(x, 2, 2).unwrap();

        // Window-scan oracle.
        let (h, w) = (6, 6);
        for p in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best
                                .max(xt.data()[p * h * w + (oy * 2 + dy) * w + ox * 2 + dx]);
                        }
                    }
                    assert_eq!(tape.data(y)[p * 9 + oy * 3 + ox], best);
                }
            }
        }
    }

    #[test]
    fn maxpool_zero_window_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 4, 4]), false);
        assert!(matches!(
            tape.maxpool2d(x, 0, 1),
            Err(TensorError::InvalidArgument(_))
        ));
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[3], &[-1.0, 0.0, 2.5]), false);
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.5]);

        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[3], &[1.0, 2.0, 3.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let eye = tape.leaf(&tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b0 = tape.leaf(&tensor(&[2], &[0.0, 0.0]), false);
        let y = tape.linear(x, eye, b0).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);

        let zeros = tape.leaf(&Tensor::zeros(vec![2, 2]), false);
        let b = tape.leaf(&tensor(&[2], &[0.5, -0.5]), false);
        let y = tape.linear(x, zeros, b).unwrap();
        assert_eq!(tape.data(y), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = random_tensor(&[3, 5], &mut rng);
        let wt = random_tensor(&[5, 4], &mut rng);
        let bt = random_tensor(&[4], &mut rng);

        let mut expected = vec![0.0; 3 * 4];
        for n in 0..3 {
            for k in 0..4 {
                let mut acc = bt.data()[k];
                for d in 0..5 {
                    acc += xt.data()[n * 5 + d] * wt.data()[d * 4 + k];
                }
                expected[n * 4 + k] = acc;
            }
        }

        let mut tape = Tape::new();
        let x = tape.leaf(&xt, false);
        let w = tape.leaf(&wt, false);
        let b = tape.leaf(&bt, false);
        let y = tape.linear(x, w, b).unwrap();
        for (got, want) in tape.data(y).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_dimension_mismatch_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
        let w = tape.leaf(&Tensor::zeros(vec![4, 2]), false);
        let b = tape.leaf(&Tensor::zeros(vec![2]), false);
        assert!(matches!(
            tape.linear(x, w, b),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 81]), false);
        let y = tape.softmax(x).unwrap();
        for &v in tape.data(y) {
            assert!((v - 1.0 / 81.0).abs() < 1e-15);
        }

        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 2], &[1000.0, 0.0]), false);
        let y = tape.softmax(x).unwrap();
        let out = tape.data(y);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0] > 1.0 - 1e-12);
        assert!(out[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = random_tensor(&[1, 7], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(&xt, false);
        let y = tape.softmax(x).unwrap();

        let sum: f64 = xt.data().iter().map(|v| v.exp()).sum();
        for (got, &z) in tape.data(y).iter().zip(xt.data()) {
            assert!((got - z.exp() / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_large_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let scale = rng.gen_range(1.0..1e4);
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-scale..scale)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(&tensor(&[2, 6], &data), false);
            let y = tape.softmax(x).unwrap();
            for row in tape.data(y).chunks(6) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = random_tensor(&[2, 3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(&xt, true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6][..]);
    }

    #[test]
    fn backward_of_zero_weighted_is_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xt = random_tensor(&[4], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(&xt, true);
        let loss = tape.reduce_weighted(x, &[0.0; 4]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 4][..]);
    }

    #[test]
    fn backward_twice_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::State(_))));
    }

    #[test]
    fn backward_non_scalar_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::InvalidArgument(_))
        ));
    }

    #[test]
    fn gradient_accumulation_is_additive() {
        // Integer-valued data keeps every sum exact in f64, so reuse must
        // match the sum of the two single-use gradients bit for bit.
        let xt = tensor(&[3], &[1.0, 2.0, 3.0]);
        let w1 = [2.0, 4.0, 8.0];
        let w2 = [16.0, 32.0, 64.0];

        let mut tape = Tape::new();
        let x = tape.leaf(&xt, true);
        let a = tape.reduce_weighted(x, &w1).unwrap();
        let b = tape.reduce_weighted(x, &w2).unwrap();
        let loss = tape.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap();
        tape.backward(loss).unwrap();
        let got = tape.grad(x).unwrap().to_vec();

        let expected: Vec<f64> = w1.iter().zip(&w2).map(|(&u, &v)| u + v).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt = random_tensor(&[2, 3, 8, 8], &mut rng);
        let kt = random_tensor(&[4, 3, 3, 3], &mut rng);
        let bt = random_tensor(&[4], &mut rng);

        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&xt, false);
            let k = tape.leaf(&kt, false);
            let b = tape.leaf(&bt, false);
            let y = tape.conv2d(x, k, b, 1, 1).unwrap();
            let p = tape.maxpool2d(y, 2, 2).unwrap();
            tape.value(p)
        };
        let a = run();
        let b = run();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xt = random_tensor(&[3, 5], &mut rng);
        let targets = [0usize, 3, 4];

        let mut tape = Tape::new();
        let x = tape.leaf(&xt, false);
        let loss = tape.cross_entropy_mean(x, &targets).unwrap();

        let mut expected = 0.0;
        for (n, &t) in targets.iter().enumerate() {
            let row = &xt.data()[n * 5..][..5];
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            expected += -(row[t].exp() / sum).ln();
        }
        expected /= 3.0;
        assert!((tape.scalar_value(loss).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::scalar(3.0), true);
        let b = tape.leaf(&Tensor::scalar(5.0), true);
        let y = tape.weighted_sum(&[(a, 0.5), (b, 2.0)]).unwrap();
        assert_eq!(tape.scalar_value(y).unwrap(), 11.5);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.5]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0]);
    }
}
