use super::batchnorm::{batch_stats, BnLayout, BnMode, BnState};
use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BiasAdd {
        x: Var,
        bias: Var,
    },
    Sum(Var),
    Mean(Var),
    GlobalAvgPool {
        x: Var,
        plane: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        extents: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LogSoftmax {
        x: Var,
        cols: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    PairwiseDistance {
        x: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::Relu(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BiasAdd { x, bias } => vec![*x, *bias],
            Op::GlobalAvgPool { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Gather { x, .. }
            | Op::GatherRows { x, .. }
            | Op::PairwiseDistance { x } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Tape of executed primitives. Nodes are appended in execution order, so
/// the reverse of insertion order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn bad_rank(op: &'static str, t: &Tensor, reason: &str) -> Error {
    Error::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.to_string(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward pass(es), if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- primitives -------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }))
    }

    /// Cross-correlation of `[B, C, H, W]` input with `[O, C, kh, kw]`
    /// weights, zero padding on every side.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(input), self.value(weight));
        if tx.shape().len() != 4 || tw.shape().len() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(mismatch("conv2d", tx, tw));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch("conv2d", tx, tw));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let plane_in = c * h * w;
        let mut cols = vec![0.0; b * rows * ncols];
        let mut out = vec![0.0; b * o * ncols];
        for s in 0..b {
            let col = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
            im2col(&tx.data()[s * plane_in..(s + 1) * plane_in], &geom, col);
            gemm(
                o,
                rows,
                ncols,
                tw.data(),
                false,
                col,
                false,
                0.0,
                &mut out[s * o * ncols..(s + 1) * o * ncols],
            );
        }
        let value = Tensor::new(vec![b, o, geom.out_height(), geom.out_width()], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                geom,
                batch: b,
                out_channels: o,
                cols,
            },
        ))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::AddScalar(x))
    }

    /// `[B, D] + [D]`, the bias broadcast over rows.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(mismatch("bias_add", tx, tb));
        }
        let d = tx.shape()[1];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % d])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::BiasAdd { x, bias }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 4 {
            return Err(bad_rank("global_avg_pool", t, "expected [B, C, H, W]"));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let plane = t.shape()[2] * t.shape()[3];
        let data = t
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![b, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x, plane }))
    }

    /// Max pooling without padding. Ties resolve to the first window element.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 4 {
            return Err(bad_rank("max_pool2d", t, "expected [B, C, H, W]"));
        }
        let (b, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(bad_rank("max_pool2d", t, "pooling window does not fit"));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if t.data()[idx] > t.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(t.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *inputs
                    .first()
                    .ok_or_else(|| Error::invalid("concat of nothing"))?,
            )
            .clone();
        if axis >= first.shape().len() {
            return Err(bad_rank("concat", &first, "axis out of range"));
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut extents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = self.value(v);
            let same_rest = t.shape().len() == first.shape().len()
                && t.shape()[..axis] == first.shape()[..axis]
                && t.shape()[axis + 1..] == first.shape()[axis + 1..];
            if !same_rest {
                return Err(mismatch("concat", &first, t));
            }
            extents.push(t.shape()[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in inputs.iter().zip(&extents) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                extents,
            },
        ))
    }

    /// Batch normalization over axis 1 of a `[B, C, ...]` tensor:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`.
    ///
    /// Train mode uses biased batch statistics and folds them into `state`;
    /// eval mode reads the running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: BnMode,
    ) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 2 {
            return Err(bad_rank("batch_norm", t, "expected [B, C, ...]"));
        }
        let layout = BnLayout {
            outer: t.shape()[0],
            channels: t.shape()[1],
            inner: t.shape()[2..].iter().product(),
        };
        let c = layout.channels;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(mismatch("batch_norm", t, self.value(p)));
            }
        }
        if state.channels() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: t.shape().to_vec(),
                rhs: vec![state.channels()],
            });
        }
        let train = mode == BnMode::Train;
        if train && layout.outer < 2 {
            return Err(bad_rank(
                "batch_norm",
                t,
                "train mode needs a batch of at least 2",
            ));
        }
        let (mean, var) = if train {
            let (m, v) = batch_stats(t.data(), layout);
            state.update(&m, &v);
            (m, v)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        for ch in 0..c {
            layout.for_each_in_channel(ch, |i| {
                xhat[i] = (t.data()[i] - mean[ch]) * inv_std[ch];
                out[i] = g[ch] * xhat[i] + b[ch];
            });
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Row-wise log-softmax of `[B, N]`, computed as `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(bad_rank("log_softmax", t, "expected [B, N]"));
        }
        let cols = t.shape()[1];
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax { x, cols }))
    }

    /// Pick flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if indices.is_empty() {
            return Err(Error::invalid("gather needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(bad_rank("gather", t, &format!("index {bad} out of range")));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Select rows of a `[N, D]` tensor, `[rows.len(), D]` out.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(bad_rank("gather_rows", t, "expected [N, D]"));
        }
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows needs at least one row"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.shape()[0]) {
            return Err(bad_rank(
                "gather_rows",
                t,
                &format!("row {bad} out of range"),
            ));
        }
        let d = t.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Euclidean (non-squared) distances between the rows of `[B, D]`.
    /// The gradient of a zero distance is taken as 0.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(bad_rank("pairwise_distance", t, "expected [B, D]"));
        }
        let b = t.shape()[0];
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in i + 1..b {
                let d = t
                    .row(i)
                    .iter()
                    .zip(t.row(j))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                out[i * b + j] = d;
                out[j * b + i] = d;
            }
        }
        let value = Tensor::new(vec![b, b], out)?;
        Ok(self.push(value, Op::PairwiseDistance { x }))
    }

    // ---- backward ---------------------------------------------------------

    /// Populate `d loss / d v` for every node that tracks gradients.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(bad_rank(
                "backward",
                self.value(loss),
                "loss must be a scalar",
            ));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(&op, &grad, i);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => add_into(existing, g),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Graph)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut buf = vec![0.0; self.nodes[v.0].value.len()];
        f(&mut buf, self);
        self.accumulate(v, &buf);
    }

    fn backward_op(&mut self, op: &Op, grad: &[f64], out_index: usize) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                self.accumulate_with(a, |buf, g| {
                    gemm(m, n, k, grad, false, g.value(b).data(), true, 0.0, buf)
                });
                self.accumulate_with(b, |buf, g| {
                    gemm(k, m, n, g.value(a).data(), true, grad, false, 0.0, buf)
                });
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                batch,
                out_channels,
                cols,
            } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let o = *out_channels;
                let plane_in = geom.channels * geom.height * geom.width;
                self.accumulate_with(*weight, |buf, _| {
                    for s in 0..*batch {
                        gemm(
                            o,
                            ncols,
                            rows,
                            &grad[s * o * ncols..(s + 1) * o * ncols],
                            false,
                            &cols[s * rows * ncols..(s + 1) * rows * ncols],
                            true,
                            1.0,
                            buf,
                        );
                    }
                });
                self.accumulate_with(*input, |buf, g| {
                    let w = g.value(*weight).data();
                    let mut dcol = vec![0.0; rows * ncols];
                    for s in 0..*batch {
                        gemm(
                            rows,
                            o,
                            ncols,
                            w,
                            true,
                            &grad[s * o * ncols..(s + 1) * o * ncols],
                            false,
                            0.0,
                            &mut dcol,
                        );
                        col2im(&dcol, geom, &mut buf[s * plane_in..(s + 1) * plane_in]);
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                self.accumulate_with(x, |buf, g| {
                    for ((d, &gv), &xv) in buf.iter_mut().zip(grad).zip(g.value(x).data()) {
                        *d = if xv > 0.0 { gv } else { 0.0 };
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grad);
                let neg: Vec<f64> = grad.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_with(a, |buf, g| {
                    for ((d, &gv), &bv) in buf.iter_mut().zip(grad).zip(g.value(b).data()) {
                        *d = gv * bv;
                    }
                });
                self.accumulate_with(b, |buf, g| {
                    for ((d, &gv), &av) in buf.iter_mut().zip(grad).zip(g.value(a).data()) {
                        *d = gv * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                let scaled: Vec<f64> = grad.iter().map(|v| v * c).collect();
                self.accumulate(*x, &scaled);
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(*x, grad),
            Op::BiasAdd { x, bias } => {
                self.accumulate(*x, grad);
                let d = self.value(*bias).len();
                self.accumulate_with(*bias, |buf, _| {
                    for (i, gv) in grad.iter().enumerate() {
                        buf[i % d] += gv;
                    }
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, &vec![grad[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, &vec![grad[0] / n as f64; n]);
            }
            Op::GlobalAvgPool { x, plane } => {
                let p = *plane;
                self.accumulate_with(*x, |buf, _| {
                    for (chunk, gv) in buf.chunks_mut(p).zip(grad) {
                        chunk.fill(gv / p as f64);
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => {
                self.accumulate_with(*x, |buf, _| {
                    for (&idx, gv) in argmax.iter().zip(grad) {
                        buf[idx] += gv;
                    }
                });
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                extents,
            } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                for (&v, &e) in inputs.iter().zip(extents) {
                    self.accumulate_with(v, |buf, _| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            buf[o * e * inner..(o + 1) * e * inner]
                                .copy_from_slice(&grad[src..src + e * inner]);
                        }
                    });
                    offset += e;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            } => {
                let c = layout.channels;
                let n = layout.count() as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    layout.for_each_in_channel(ch, |i| {
                        dgamma[ch] += grad[i] * xhat[i];
                        dbeta[ch] += grad[i];
                    });
                }
                let gvals = self.value(*gamma).data().to_vec();
                self.accumulate_with(*x, |buf, _| {
                    for ch in 0..c {
                        let scale = gvals[ch] * inv_std[ch];
                        if *train {
                            // dx = g*inv_std/n * (n*dy - sum(dy) - xhat*sum(dy*xhat))
                            let (sum_dy, sum_dy_xhat) = (dbeta[ch], dgamma[ch]);
                            layout.for_each_in_channel(ch, |i| {
                                buf[i] = scale / n * (n * grad[i] - sum_dy - xhat[i] * sum_dy_xhat);
                            });
                        } else {
                            layout.for_each_in_channel(ch, |i| buf[i] = scale * grad[i]);
                        }
                    }
                });
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::LogSoftmax { x, cols } => {
                let cols = *cols;
                let out = self.nodes[out_index].value.data().to_vec();
                self.accumulate_with(*x, |buf, _| {
                    for ((drow, grow), yrow) in buf
                        .chunks_mut(cols)
                        .zip(grad.chunks(cols))
                        .zip(out.chunks(cols))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..cols {
                            drow[j] = grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Gather { x, indices } => {
                self.accumulate_with(*x, |buf, _| {
                    for (&i, gv) in indices.iter().zip(grad) {
                        buf[i] += gv;
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = self.value(*x).shape()[1];
                self.accumulate_with(*x, |buf, _| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut buf[r * d..(r + 1) * d], &grad[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::PairwiseDistance { x } => {
                let dist = self.nodes[out_index].value.data().to_vec();
                self.accumulate_with(*x, |buf, g| {
                    let t = g.value(*x);
                    let (b, d) = (t.shape()[0], t.shape()[1]);
                    for i in 0..b {
                        for j in 0..b {
                            let dij = dist[i * b + j];
                            if i == j || dij == 0.0 {
                                continue;
                            }
                            // d(D_ij)/dx_i = (x_i - x_j) / D_ij, and D_ji mirrors it.
                            let coef = (grad[i * b + j] + grad[j * b + i]) / dij;
                            for k in 0..d {
                                buf[i * d + k] +=
                                    coef * (t.data()[i * d + k] - t.data()[j * d + k]);
                            }
                        }
                    }
                });
            }
        }
    }
}
