//! Reverse-mode differentiation over the fixed primitive set used by the
//! energy networks: convolution, ReLU, batch normalization, fully-connected
//! and full-sum reduction.
//!
//! Every primitive records its output and the intermediates its backward
//! rule needs. `backward` walks the records in reverse and returns gradients
//! only for leaves created with `requires_grad = true`. Branches that cannot
//! reach such a leaf are skipped, so a sampling pass (input gradient only)
//! never pays for weight gradients and a learning pass never pays for the
//! first layer's input gradient.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by a batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize by the mean/variance of the current batch.
    Batch,
    /// Normalize by stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch mean and biased variance observed by a train-mode
/// batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    BatchNorm,
    FullyConnected,
    Sum,
    Add,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, padding: usize, cols: Option<Vec<T>> },
    Relu { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    FullyConnected { input: Var, weight: Var, bias: Var },
    Sum { input: Var },
    Add { a: Var, b: Var },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::FullyConnected { .. } => OpKind::FullyConnected,
            Op::Sum { .. } => OpKind::Sum,
            Op::Add { .. } => OpKind::Add,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
}

/// Recording of one forward computation. Single-owner; not shared across
/// threads while recording.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves that asked for them.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Vars that received a gradient.
    pub fn vars(&self) -> Vec<Var> {
        self.grads.iter().enumerate().filter(|(_, g)| g.is_some()).map(|(i, _)| Var(i)).collect()
    }

    /// Non-leaf records in the order backward processed them.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("var {} is not on this tape", var.0)));
        }
        Ok(())
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Cross-correlation with zero padding. `weight` is `outC x inC x kH x kW`
    /// and `bias` a vector of length `outC`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let (xs, ws) = (x.shape(), wt.shape());
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if xs.c != ws.c {
            return Err(Error::dim(format!(
                "conv2d input channels (axis 1 of input {xs}) != weight in-channels (axis 1 of weight {ws})"
            )));
        }
        if b.len() != ws.n {
            return Err(Error::dim(format!("conv2d bias length {} != weight out-channels {}", b.len(), ws.n)));
        }
        let (ho, wo) = conv_out_size(xs.h, xs.w, ws.h, ws.w, stride, padding).ok_or_else(|| {
            Error::dim(format!(
                "conv2d kernel {}x{} (axes 2,3 of weight) too large for input {}x{} (axes 2,3) with padding {padding}",
                ws.h, ws.w, xs.h, xs.w
            ))
        })?;
        let geom = ConvGeom { c: xs.c, h: xs.h, w: xs.w, kh: ws.h, kw: ws.w, stride, padding, ho, wo };
        let k = geom.k();
        let p = geom.p();
        let out_c = ws.n;
        let keep_cols = self.needs(weight);
        let mut cols_all = if keep_cols { vec![T::zero(); xs.n * k * p] } else { Vec::new() };
        let mut scratch = vec![T::zero(); k * p];
        let out_shape = Shape::new(xs.n, out_c, ho, wo);
        let mut out = vec![T::zero(); out_shape.len()];
        for n in 0..xs.n {
            let cols = if keep_cols { &mut cols_all[n * k * p..(n + 1) * k * p] } else { &mut scratch[..] };
            im2col(x.item(n), &geom, cols);
            let out_n = &mut out[n * out_c * p..(n + 1) * out_c * p];
            for (oc, row) in out_n.chunks_mut(p).enumerate() {
                row.fill(b.data()[oc]);
            }
            T::gemm(out_c, k, p, wt.data(), k as isize, 1, cols, p as isize, 1, T::one(), out_n, p as isize, 1);
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let op = Op::Conv2d { input, weight, bias, stride, padding, cols: keep_cols.then_some(cols_all) };
        Ok(self.push(Tensor::new(out_shape, out)?, op, false, needs))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let y = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(input);
        Ok(self.push(y, Op::Relu { input }, false, needs))
    }

    /// Per-channel normalization over (N, H, W). Returns the batch moments
    /// in batch-statistics mode so the caller can update running averages.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        for v in [input, gamma, beta] {
            self.check(v)?;
        }
        let x = self.value(input);
        let s = x.shape();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        if g.len() != s.c || bt.len() != s.c {
            return Err(Error::dim(format!(
                "batchnorm gamma/beta length {}/{} != channels (axis 1) {}",
                g.len(),
                bt.len(),
                s.c
            )));
        }
        let eps = T::from_f64_lossy(BN_EPSILON);
        let count = s.n * s.plane();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if count < 2 {
                    return Err(Error::DegenerateStatistics(count));
                }
                let mean = x.channel_means();
                let mut var = vec![T::zero(); s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * s.plane();
                        var[c] = var[c]
                            + x.data()[off..off + s.plane()].iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
                    }
                }
                let m = T::from_usize(count).unwrap();
                (mean, var.into_iter().map(|v| v / m).collect::<Vec<_>>(), true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != s.c || var.len() != s.c {
                    return Err(Error::dim("batchnorm running statistics length != channels (axis 1)"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); s.len()];
        let mut y = vec![T::zero(); s.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * s.plane();
                for i in off..off + s.plane() {
                    let xh = (x.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = xh;
                    y[i] = g[c] * xh + bt[c];
                }
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let moments = batch.then(|| BatchMoments { mean, var, count });
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch };
        Ok((self.push(Tensor::new(s, y)?, op, false, needs), moments))
    }

    /// Affine map of the flattened input. `weight` is `D x K x 1 x 1` with
    /// `D = C*H*W` of the input; output is `N x K x 1 x 1`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let (xs, ws) = (x.shape(), wt.shape());
        let d = xs.item_len();
        if ws.n != d || ws.h != 1 || ws.w != 1 {
            return Err(Error::dim(format!(
                "fully_connected input features {d} (axes 1..3 of input {xs}) != weight rows (axis 0 of {ws})"
            )));
        }
        let k = ws.c;
        if b.len() != k {
            return Err(Error::dim(format!("fully_connected bias length {} != outputs {k}", b.len())));
        }
        let mut out = Vec::with_capacity(xs.n * k);
        for _ in 0..xs.n {
            out.extend_from_slice(b.data());
        }
        T::gemm(xs.n, d, k, x.data(), d as isize, 1, wt.data(), k as isize, 1, T::one(), &mut out, k as isize, 1);
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let op = Op::FullyConnected { input, weight, bias };
        Ok(self.push(Tensor::new(Shape::new(xs.n, k, 1, 1), out)?, op, false, needs))
    }

    /// Sum of every element, as a `1x1x1x1` tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let total = self.value(input).sum();
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(total).reshape(Shape::new(1, 1, 1, 1))?, Op::Sum { input }, false, needs))
    }

    /// Sign pattern (`x > 0`) of every ReLU input on the tape, in recording
    /// order. Two evaluations with equal patterns lie on the same linear
    /// piece of the ReLU nonlinearities.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { input } = node.op {
                out.extend(self.value(input).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Elementwise sum of two tensors of the same shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, false, needs))
    }

    /// Backward pass from a single-element output with upstream gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        self.check(output)?;
        if self.value(output).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar output, got {}",
                self.value(output).shape()
            )));
        }
        let seed = Tensor::full(self.value(output).shape(), T::one());
        self.backward_seeded(output, seed)
    }

    /// Backward pass with an explicit upstream gradient for `output`,
    /// equivalent to differentiating `sum(seed * output)`.
    pub fn backward_seeded(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.check(output)?;
        seed.expect_shape(self.value(output).shape())?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[output.0] = Some(seed.into_vec());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            visited.push(Var(idx));
            self.backward_node(node, &dy, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, node.requires_grad) {
                (Some(g), true) => Some(Tensor::new(node.value.shape(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<T>>], var: Var) -> Option<&'g mut Vec<T>> {
        if !self.needs(var) {
            return None;
        }
        let len = self.value(var).len();
        Some(grads[var.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Sum { input } => {
                if let Some(gx) = self.accumulate(grads, *input) {
                    for g in gx.iter_mut() {
                        *g = *g + dy[0];
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(g) = self.accumulate(grads, v) {
                        for (g, &d) in g.iter_mut().zip(dy) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                if let Some(gx) = self.accumulate(grads, *input) {
                    for ((g, &xv), &d) in gx.iter_mut().zip(x).zip(dy) {
                        if xv > T::zero() {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::FullyConnected { input, weight, bias } => {
                let xs = self.value(*input).shape();
                let d = xs.item_len();
                let k = self.value(*weight).shape().c;
                let n = xs.n;
                if let Some(gb) = self.accumulate(grads, *bias) {
                    for row in dy.chunks(k) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                }
                if self.needs(*weight) {
                    let x = self.value(*input).data();
                    let gw = self.accumulate(grads, *weight).unwrap();
                    // dW[D x K] += X^T[D x N] * dY[N x K]
                    T::gemm(d, n, k, x, 1, d as isize, dy, k as isize, 1, T::one(), gw, k as isize, 1);
                }
                if self.needs(*input) {
                    let w = self.value(*weight).data();
                    let gx = self.accumulate(grads, *input).unwrap();
                    // dX[N x D] += dY[N x K] * W^T[K x D]
                    T::gemm(n, k, d, dy, k as isize, 1, w, 1, k as isize, T::one(), gx, d as isize, 1);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch } => {
                let s = self.value(*input).shape();
                let plane = s.plane();
                let mut sum_dy = vec![T::zero(); s.c];
                let mut sum_dy_xhat = vec![T::zero(); s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * plane;
                        for i in off..off + plane {
                            sum_dy[c] = sum_dy[c] + dy[i];
                            sum_dy_xhat[c] = sum_dy_xhat[c] + dy[i] * xhat[i];
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *beta) {
                    for (g, &v) in gb.iter_mut().zip(&sum_dy) {
                        *g = *g + v;
                    }
                }
                if let Some(gg) = self.accumulate(grads, *gamma) {
                    for (g, &v) in gg.iter_mut().zip(&sum_dy_xhat) {
                        *g = *g + v;
                    }
                }
                if self.needs(*input) {
                    let gamma_v = self.value(*gamma).data();
                    let m = T::from_usize(s.n * plane).unwrap();
                    let gx = self.accumulate(grads, *input).unwrap();
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let off = (n * s.c + c) * plane;
                            let k = gamma_v[c] * inv_std[c];
                            for i in off..off + plane {
                                let v = if *batch {
                                    k * (dy[i] - sum_dy[c] / m - xhat[i] * sum_dy_xhat[c] / m)
                                } else {
                                    k * dy[i]
                                };
                                gx[i] = gx[i] + v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, bias, stride, padding, cols } => {
                let xs = self.value(*input).shape();
                let ws = self.value(*weight).shape();
                let ys = node.value.shape();
                let geom = ConvGeom {
                    c: xs.c,
                    h: xs.h,
                    w: xs.w,
                    kh: ws.h,
                    kw: ws.w,
                    stride: *stride,
                    padding: *padding,
                    ho: ys.h,
                    wo: ys.w,
                };
                let (k, p, out_c) = (geom.k(), geom.p(), ws.n);
                if let Some(gb) = self.accumulate(grads, *bias) {
                    for n in 0..xs.n {
                        for (oc, g) in gb.iter_mut().enumerate() {
                            let off = (n * out_c + oc) * p;
                            *g = *g + dy[off..off + p].iter().copied().sum::<T>();
                        }
                    }
                }
                if self.needs(*weight) {
                    let cols = cols.as_ref().expect("columns kept for weight gradient");
                    let gw = self.accumulate(grads, *weight).unwrap();
                    for n in 0..xs.n {
                        let dy_n = &dy[n * out_c * p..(n + 1) * out_c * p];
                        let cols_n = &cols[n * k * p..(n + 1) * k * p];
                        // dW[outC x K] += dY_n[outC x P] * cols_n^T[P x K]
                        T::gemm(out_c, p, k, dy_n, p as isize, 1, cols_n, 1, p as isize, T::one(), gw, k as isize, 1);
                    }
                }
                if self.needs(*input) {
                    let w = self.value(*weight).data();
                    let gx = self.accumulate(grads, *input).unwrap();
                    let mut dcols = vec![T::zero(); k * p];
                    let item = xs.item_len();
                    for n in 0..xs.n {
                        let dy_n = &dy[n * out_c * p..(n + 1) * out_c * p];
                        // dcols[K x P] = W^T[K x outC] * dY_n[outC x P]
                        T::gemm(k, out_c, p, w, 1, k as isize, dy_n, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                        col2im(&dcols, &geom, &mut gx[n * item..(n + 1) * item]);
                    }
                }
            }
        }
    }
}

/// Output spatial size of a convolution, or `None` when the kernel does not
/// fit the padded input.
pub fn conv_out_size(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Option<(usize, usize)> {
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    if kh == 0 || kw == 0 || stride == 0 || ph < kh || pw < kw {
        return None;
    }
    Some(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output index `o` and kernel offset `k`.
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    match g.source(oh, ki, g.h) {
                        None => out.fill(T::zero()),
                        Some(ih) => {
                            let src = &plane[ih * g.w..(ih + 1) * g.w];
                            for (ow, o) in out.iter_mut().enumerate() {
                                *o = g.source(ow, kj, g.w).map_or(T::zero(), |iw| src[iw]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let Some(ih) = g.source(oh, ki, g.h) else { continue };
                    for ow in 0..g.wo {
                        if let Some(iw) = g.source(ow, kj, g.w) {
                            let d = &mut plane[ih * g.w + iw];
                            *d = *d + src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0), false);
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0), false);
        let b = tape.leaf(Tensor::vector(vec![0.0]), false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_of_zero_input_is_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(2, 2, 4, 4)), false);
        let w = tape.leaf(Tensor::full(Shape::new(3, 2, 3, 3), 0.7), false);
        let b = tape.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]), false);
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), Shape::new(2, 3, 2, 2));
        for n in 0..2 {
            for (c, bias) in [1.0, -2.0, 0.5].into_iter().enumerate() {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(out.at(n, c, i, j), bias);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)), false);
        let w = tape.leaf(Tensor::zeros(Shape::new(1, 3, 3, 3)), false);
        let b = tape.leaf(Tensor::vector(vec![0.0]), false);
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
        let w2 = tape.leaf(Tensor::zeros(Shape::new(1, 2, 7, 7)), false);
        assert!(tape.conv2d(x, w2, b, 1, 0).is_err());
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 2), &[-1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        let g = tape.backward_seeded(y, t(Shape::new(1, 1, 1, 2), &[5.0, 5.0])).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 1), &[0.0]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn relu_is_identity_on_positives() {
        let mut tape = Tape::<f64>::new();
        let v = t(Shape::new(1, 2, 1, 2), &[0.5, 1.0, 2.0, 3.0]);
        let x = tape.leaf(v.clone(), false);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &v);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(Shape::new(3, 2, 2, 2), |n, c, h, w| (n * 7 + c * 3 + h * 2 + w) as f64 * 0.37), false);
        let g = tape.leaf(Tensor::vector(vec![1.0, 1.0]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let (y, m) = tape.batchnorm(x, g, b, NormStats::Batch).unwrap();
        assert_eq!(m.unwrap().count, 12);
        let y = tape.value(y);
        let means = y.channel_means();
        for c in 0..2 {
            assert!(means[c].abs() < 1e-12);
            let mut var = 0.0;
            for n in 0..3 {
                for h in 0..2 {
                    for w in 0..2 {
                        var += y.at(n, c, h, w).powi(2);
                    }
                }
            }
            assert!((var / 12.0 - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(2, 1, 2, 2), 4.2), false);
        let g = tape.leaf(Tensor::vector(vec![1.0]), false);
        let b = tape.leaf(Tensor::vector(vec![3.0]), false);
        let (y, _) = tape.batchnorm(x, g, b, NormStats::Batch).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 3.0).abs() < 1e-9));
    }

    #[test]
    fn batchnorm_single_element_is_degenerate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)), false);
        let g = tape.leaf(Tensor::vector(vec![1.0; 3]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0; 3]), false);
        assert!(matches!(
            tape.batchnorm(x, g, b, NormStats::Batch),
            Err(Error::DegenerateStatistics(1))
        ));
        // running statistics are fine with a single element
        let (mean, var) = (vec![0.0; 3], vec![1.0; 3]);
        assert!(tape.batchnorm(x, g, b, NormStats::Running { mean: &mean, var: &var }).is_ok());
    }

    #[test]
    fn fully_connected_identity_and_bias() {
        let mut tape = Tape::<f64>::new();
        let v = t(Shape::new(2, 3, 1, 1), &[1.0, 2.0, 3.0, -4.0, 5.0, 6.0]);
        let x = tape.leaf(v.clone(), false);
        let eye = Tensor::from_fn(Shape::new(3, 3, 1, 1), |r, c, _, _| if r == c { 1.0 } else { 0.0 });
        let w = tape.leaf(eye, false);
        let b = tape.leaf(Tensor::vector(vec![0.0; 3]), false);
        let y = tape.fully_connected(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), v.data());

        let z = tape.leaf(Tensor::zeros(Shape::new(2, 3, 1, 1)), false);
        let b2 = tape.leaf(Tensor::vector(vec![7.0, 8.0, 9.0]), false);
        let y2 = tape.fully_connected(z, w, b2).unwrap();
        assert_eq!(tape.value(y2).data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);

        let bad = tape.leaf(Tensor::zeros(Shape::new(4, 3, 1, 1)), false);
        assert!(tape.fully_connected(x, bad, b).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(Shape::new(2, 1, 2, 2), |n, _, h, w| (n + h + w) as f64), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dead_relu_gives_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), -0.3), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_only_for_marked_leaves() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 0.5), true);
        let w = tape.leaf(Tensor::full(Shape::new(2, 1, 3, 3), 0.1), false);
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]), true);
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let r = tape.relu(y).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.vars(), vec![x, b]);
        assert!(g.get(w).is_none());
        // exact reverse order of recording
        assert_eq!(g.visit_order(), &[s, r, y]);
    }

    #[test]
    fn backward_rejects_foreign_or_vector_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 2)), true);
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
        assert!(matches!(tape.backward(Var(99)), Err(Error::Tape(_))));
    }

    #[test]
    fn add_passes_gradient_to_both_inputs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]), true);
        let b = tape.leaf(t(Shape::new(1, 1, 1, 2), &[3.0, -5.0]), true);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, -3.0]);
        let g = tape.backward_seeded(c, t(Shape::new(1, 1, 1, 2), &[2.0, 7.0])).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 7.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 7.0]);
    }
}
