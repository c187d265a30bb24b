//! Reverse-mode differentiation over a recorded forward graph.
//!
//! The tape holds exactly the layer operations the networks here need:
//! conv2d, batch norm, ReLU, 2x2 max-pool, flatten, dense, residual add and
//! softmax cross-entropy. Activations are NHWC; every value is f64. Forward
//! results are bitwise deterministic: batch parallelism uses fixed-size
//! chunks and all cross-example reductions are summed in chunk order.

use crate::error::{Error, Result};
use crate::tensor::{dgemm, Tensor};
use rayon::prelude::*;

/// Examples per parallel work unit. Fixed so reduction order never depends
/// on thread count.
const BATCH_CHUNK: usize = 8;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Per-channel batch statistics produced by a train-mode batch norm, for the
/// caller's running-average update.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct BnCache {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// True when the statistics are functions of the input (train mode) and
    /// the backward pass must include the statistic terms.
    batch_stats: bool,
}

enum Op {
    Leaf,
    Conv2d { x: NodeId, kernel: NodeId, stride: usize, padding: Padding },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache },
    Relu { x: NodeId },
    MaxPool2 { x: NodeId, argmax: Vec<u8> },
    Flatten { x: NodeId },
    Dense { x: NodeId, weight: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    label: String,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

/// Output spatial extent plus leading pad for one axis.
fn conv_axis(extent: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let needed = (out - 1) * stride + k;
            let pad = needed.saturating_sub(extent);
            Ok((out, pad / 2))
        }
        Padding::Valid => {
            if extent < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("input extent {extent} smaller than kernel {k} with valid padding"),
                ));
            }
            Ok(((extent - k) / stride + 1, 0))
        }
    }
}

/// Gather one example's receptive fields into a [ho*wo, kh*kw*cin] matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let patch = kh * kw * cin;
    debug_assert_eq!(cols.len(), ho * wo * patch);
    for oi in 0..ho {
        for oj in 0..wo {
            let row = (oi * wo + oj) * patch;
            for p in 0..kh {
                let si = (oi * stride + p) as isize - pad_top as isize;
                for q in 0..kw {
                    let sj = (oj * stride + q) as isize - pad_left as isize;
                    let dst = row + (p * kw + q) * cin;
                    if si >= 0 && (si as usize) < h && sj >= 0 && (sj as usize) < w {
                        let src = ((si as usize) * w + sj as usize) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    } else {
                        cols[dst..dst + cin].fill(0.0);
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcols: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let patch = kh * kw * cin;
    for oi in 0..ho {
        for oj in 0..wo {
            let row = (oi * wo + oj) * patch;
            for p in 0..kh {
                let si = (oi * stride + p) as isize - pad_top as isize;
                if si < 0 || si as usize >= h {
                    continue;
                }
                for q in 0..kw {
                    let sj = (oj * stride + q) as isize - pad_left as isize;
                    if sj < 0 || sj as usize >= w {
                        continue;
                    }
                    let src = row + (p * kw + q) * cin;
                    let dst = ((si as usize) * w + sj as usize) * cin;
                    for c in 0..cin {
                        dx[dst + c] += dcols[src + c];
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, label: String) -> NodeId {
        self.nodes.push(Node { value, op, label });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor, label: impl Into<String>) -> NodeId {
        self.push(value, Op::Leaf, label.into())
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
        label: impl Into<String>,
    ) -> Result<NodeId> {
        let label = label.into();
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        let (n, h, w, cin) = xv.dims4();
        let kshape = kv.shape();
        if kshape.len() != 4 {
            return Err(Error::shape(&label, format!("kernel rank {} != 4", kshape.len())));
        }
        let (kh, kw, kcin, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(Error::shape(
                &label,
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        let (ho, pad_top) = conv_axis(h, kh, stride, padding)?;
        let (wo, pad_left) = conv_axis(w, kw, stride, padding)?;

        let patch = kh * kw * cin;
        let in_ex = h * w * cin;
        let out_ex = ho * wo * cout;
        let mut out = vec![0.0; n * out_ex];
        let xd = xv.data();
        let kd = kv.data();
        out.par_chunks_mut(BATCH_CHUNK * out_ex)
            .zip(xd.par_chunks(BATCH_CHUNK * in_ex))
            .for_each(|(out_chunk, x_chunk)| {
                let mut cols = vec![0.0; ho * wo * patch];
                for (o_ex, x_ex) in out_chunk.chunks_mut(out_ex).zip(x_chunk.chunks(in_ex)) {
                    im2col(x_ex, h, w, cin, kh, kw, stride, pad_top, pad_left, ho, wo, &mut cols);
                    dgemm(ho * wo, patch, cout, 1.0, &cols, kd, 0.0, o_ex);
                }
            });
        let value = Tensor::from_vec(&[n, ho, wo, cout], out)?;
        value.check_finite(&label)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, stride, padding }, label))
    }

    /// Train-mode batch norm: normalizes with the batch's own per-channel
    /// statistics and reports them so the caller can update running averages.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        label: impl Into<String>,
    ) -> Result<(NodeId, BnBatchStats)> {
        let label = label.into();
        let xv = &self.nodes[x.0].value;
        let (_, _, _, c) = xv.dims4();
        let m = xv.len() / c;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, &v) in xv.data().iter().enumerate() {
            mean[i % c] += v;
        }
        for v in &mut mean {
            *v /= m as f64;
        }
        for (i, &v) in xv.data().iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
        for v in &mut var {
            *v /= m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BnBatchStats { mean: mean.clone(), var };
        let id = self.batchnorm_apply(x, gamma, beta, mean, inv_std, true, label)?;
        Ok((id, stats))
    }

    /// Inference-mode batch norm using fixed running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        label: impl Into<String>,
    ) -> Result<NodeId> {
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        self.batchnorm_apply(x, gamma, beta, running_mean.to_vec(), inv_std, false, label.into())
    }

    fn batchnorm_apply(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        label: String,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (_, _, _, c) = xv.dims4();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        if gv.len() != c || bv.len() != c || mean.len() != c || inv_std.len() != c {
            return Err(Error::shape(
                &label,
                format!(
                    "batch norm over {c} channels, gamma {} beta {} stats {}",
                    gv.len(),
                    bv.len(),
                    mean.len()
                ),
            ));
        }
        let data: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                (v - mean[ch]) * inv_std[ch] * gv[ch] + bv[ch]
            })
            .collect();
        let value = Tensor::from_vec(xv.shape(), data)?;
        value.check_finite(&label)?;
        let cache = BnCache { mean, inv_std, batch_stats };
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, cache }, label))
    }

    pub fn relu(&mut self, x: NodeId, label: impl Into<String>) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, label.into())
    }

    /// 2x2 max-pool, stride 2, odd trailing row/column dropped.
    pub fn maxpool2(&mut self, x: NodeId, label: impl Into<String>) -> Result<NodeId> {
        let label = label.into();
        let xv = &self.nodes[x.0].value;
        let (n, h, w, c) = xv.dims4();
        if h < 2 || w < 2 {
            return Err(Error::shape(&label, format!("spatial dims {h}x{w} too small to pool")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * ho * wo * c];
        let mut argmax = vec![0u8; n * ho * wo * c];
        let xd = xv.data();
        for ex in 0..n {
            for oi in 0..ho {
                for oj in 0..wo {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_k = 0u8;
                        for k in 0..4u8 {
                            let (di, dj) = ((k >> 1) as usize, (k & 1) as usize);
                            let v = xd[((ex * h + oi * 2 + di) * w + oj * 2 + dj) * c + ch];
                            if v > best {
                                best = v;
                                best_k = k;
                            }
                        }
                        let o = ((ex * ho + oi) * wo + oj) * c + ch;
                        out[o] = best;
                        argmax[o] = best_k;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, ho, wo, c], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, label))
    }

    pub fn flatten(&mut self, x: NodeId, label: impl Into<String>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, h, w, c) = xv.dims4();
        let value = xv.reshape(&[n, h * w * c]).expect("flatten preserves element count");
        self.push(value, Op::Flatten { x }, label.into())
    }

    pub fn dense(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        label: impl Into<String>,
    ) -> Result<NodeId> {
        let label = label.into();
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[weight.0].value;
        let bv = &self.nodes[bias.0].value;
        let (n, d) = xv.dims2();
        let (wd, u) = wv.dims2();
        if wd != d {
            return Err(Error::shape(
                &label,
                format!("flattened input length {d} but weight expects {wd}"),
            ));
        }
        if bv.len() != u {
            return Err(Error::shape(&label, format!("bias length {} != {u}", bv.len())));
        }
        let mut out = vec![0.0; n * u];
        for row in out.chunks_mut(u) {
            row.copy_from_slice(bv.data());
        }
        dgemm(n, d, u, 1.0, xv.data(), wv.data(), 1.0, &mut out);
        let value = Tensor::from_vec(&[n, u], out)?;
        value.check_finite(&label)?;
        Ok(self.push(value, Op::Dense { x, weight, bias }, label))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, label: impl Into<String>) -> Result<NodeId> {
        let label = label.into();
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                &label,
                format!("residual add of {:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }, label))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// per-row max subtraction. Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        let (n, q) = lv.dims2();
        if q < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {q}")));
        }
        if labels.len() != n {
            return Err(Error::Invalid(format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= q) {
            return Err(Error::LabelOutOfRange { label: bad, n_classes: q });
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (row, &label) in probs.data().chunks(q).zip(labels) {
            loss -= row[label].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        let value = Tensor::scalar(loss);
        value.check_finite("softmax_cross_entropy")?;
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(value, op, "softmax_cross_entropy".into()))
    }

    /// Reverse sweep from a scalar node; returns one gradient per node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            dy.check_finite(&node.label)?;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, kernel, stride, padding } => {
                    let (dx, dk) = self.conv2d_backward(*x, *kernel, *stride, *padding, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *kernel, dk);
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) = self.batchnorm_backward(*x, *gamma, cache, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let data: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), data).unwrap());
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = &self.nodes[x.0].value;
                    let (n, h, w, c) = xv.dims4();
                    let (ho, wo) = (h / 2, w / 2);
                    let mut dx = vec![0.0; xv.len()];
                    for ex in 0..n {
                        for oi in 0..ho {
                            for oj in 0..wo {
                                for ch in 0..c {
                                    let o = ((ex * ho + oi) * wo + oj) * c + ch;
                                    let k = argmax[o];
                                    let (di, dj) = ((k >> 1) as usize, (k & 1) as usize);
                                    dx[((ex * h + oi * 2 + di) * w + oj * 2 + dj) * c + ch] +=
                                        dy.data()[o];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                }
                Op::Flatten { x } => {
                    let xv = &self.nodes[x.0].value;
                    accumulate(&mut grads, *x, dy.reshape(xv.shape()).unwrap());
                }
                Op::Dense { x, weight, bias } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[weight.0].value;
                    let (n, d) = xv.dims2();
                    let (_, u) = wv.dims2();
                    // dX = dY W^T
                    let mut dx = vec![0.0; n * d];
                    unsafe {
                        matrixmultiply::dgemm(
                            n, u, d, 1.0,
                            dy.data().as_ptr(), u as isize, 1,
                            wv.data().as_ptr(), 1, u as isize,
                            0.0,
                            dx.as_mut_ptr(), d as isize, 1,
                        );
                    }
                    // dW = X^T dY
                    let mut dw = vec![0.0; d * u];
                    unsafe {
                        matrixmultiply::dgemm(
                            d, n, u, 1.0,
                            xv.data().as_ptr(), 1, d as isize,
                            dy.data().as_ptr(), u as isize, 1,
                            0.0,
                            dw.as_mut_ptr(), u as isize, 1,
                        );
                    }
                    let mut db = vec![0.0; u];
                    for row in dy.data().chunks(u) {
                        for (acc, &g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, d], dx).unwrap());
                    accumulate(&mut grads, *weight, Tensor::from_vec(&[d, u], dw).unwrap());
                    accumulate(&mut grads, *bias, Tensor::from_vec(&[u], db).unwrap());
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let scale = dy.data()[0] / labels.len() as f64;
                    let (n, q) = probs.dims2();
                    let mut dl = probs.data().to_vec();
                    for (ex, &label) in labels.iter().enumerate() {
                        dl[ex * q + label] -= 1.0;
                    }
                    for v in &mut dl {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::from_vec(&[n, q], dl).unwrap());
                }
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(t) = g {
                t.check_finite(&self.nodes[i].label)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
        dy: &Tensor,
    ) -> (Tensor, Tensor) {
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        let (n, h, w, cin) = xv.dims4();
        let kshape = kv.shape();
        let (kh, kw, cout) = (kshape[0], kshape[1], kshape[3]);
        let (ho, pad_top) = conv_axis(h, kh, stride, padding).expect("checked on forward");
        let (wo, pad_left) = conv_axis(w, kw, stride, padding).expect("checked on forward");
        let patch = kh * kw * cin;
        let in_ex = h * w * cin;
        let out_ex = ho * wo * cout;
        let kd = kv.data();
        let xd = xv.data();
        let dyd = dy.data();

        let mut dx = vec![0.0; n * in_ex];
        // Per-chunk partial kernel gradients, summed in chunk order below.
        let partials: Vec<Vec<f64>> = dx
            .par_chunks_mut(BATCH_CHUNK * in_ex)
            .zip(xd.par_chunks(BATCH_CHUNK * in_ex))
            .zip(dyd.par_chunks(BATCH_CHUNK * out_ex))
            .map(|((dx_chunk, x_chunk), dy_chunk)| {
                let mut dk = vec![0.0; patch * cout];
                let mut cols = vec![0.0; ho * wo * patch];
                let mut dcols = vec![0.0; ho * wo * patch];
                for ((dx_ex, x_ex), dy_ex) in dx_chunk
                    .chunks_mut(in_ex)
                    .zip(x_chunk.chunks(in_ex))
                    .zip(dy_chunk.chunks(out_ex))
                {
                    im2col(x_ex, h, w, cin, kh, kw, stride, pad_top, pad_left, ho, wo, &mut cols);
                    // dK += cols^T dY
                    unsafe {
                        matrixmultiply::dgemm(
                            patch, ho * wo, cout, 1.0,
                            cols.as_ptr(), 1, patch as isize,
                            dy_ex.as_ptr(), cout as isize, 1,
                            1.0,
                            dk.as_mut_ptr(), cout as isize, 1,
                        );
                    }
                    // dcols = dY K^T
                    unsafe {
                        matrixmultiply::dgemm(
                            ho * wo, cout, patch, 1.0,
                            dy_ex.as_ptr(), cout as isize, 1,
                            kd.as_ptr(), 1, cout as isize,
                            0.0,
                            dcols.as_mut_ptr(), patch as isize, 1,
                        );
                    }
                    col2im_add(
                        &dcols, h, w, cin, kh, kw, stride, pad_top, pad_left, ho, wo, dx_ex,
                    );
                }
                dk
            })
            .collect();

        let mut dk = vec![0.0; patch * cout];
        for part in &partials {
            for (acc, &v) in dk.iter_mut().zip(part) {
                *acc += v;
            }
        }
        (
            Tensor::from_vec(&[n, h, w, cin], dx).unwrap(),
            Tensor::from_vec(kshape, dk).unwrap(),
        )
    }

    fn batchnorm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        cache: &BnCache,
        dy: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let xv = &self.nodes[x.0].value;
        let gv = self.nodes[gamma.0].value.data();
        let c = *xv.shape().last().unwrap();
        let m = (xv.len() / c) as f64;
        let xd = xv.data();
        let dyd = dy.data();

        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for (i, (&g, &v)) in dyd.iter().zip(xd).enumerate() {
            let ch = i % c;
            let xhat = (v - cache.mean[ch]) * cache.inv_std[ch];
            dbeta[ch] += g;
            dgamma[ch] += g * xhat;
        }

        let mut dx = vec![0.0; xd.len()];
        if cache.batch_stats {
            for (i, (&g, &v)) in dyd.iter().zip(xd).enumerate() {
                let ch = i % c;
                let xhat = (v - cache.mean[ch]) * cache.inv_std[ch];
                dx[i] = gv[ch] * cache.inv_std[ch]
                    * (g - (dbeta[ch] + xhat * dgamma[ch]) / m);
            }
        } else {
            for (i, &g) in dyd.iter().enumerate() {
                let ch = i % c;
                dx[i] = g * gv[ch] * cache.inv_std[ch];
            }
        }
        (
            Tensor::from_vec(xv.shape(), dx).unwrap(),
            Tensor::from_vec(&[c], dgamma).unwrap(),
            Tensor::from_vec(&[c], dbeta).unwrap(),
        )
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Row-wise softmax of a [n, q] tensor, max-stabilized.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, q) = logits.dims2();
    let mut out = vec![0.0; n * q];
    for (row_out, row) in out.chunks_mut(q).zip(logits.data().chunks(q)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in row_out.iter_mut().zip(row) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::from_vec(&[n, q], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_conv_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap(), "x");
        let k = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap(), "k");
        let y = tape.conv2d(x, k, 1, Padding::Same, "conv").unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 4, 4, 3], 1.7), "x");
        let k = tape.leaf(Tensor::zeros(&[3, 3, 3, 5]), "k");
        let y = tape.conv2d(x, k, 1, Padding::Same, "conv").unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_names_layer() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4, 3]), "x");
        let k = tape.leaf(Tensor::zeros(&[3, 3, 2, 5]), "k");
        let err = tape.conv2d(x, k, 1, Padding::Same, "stage0.block1.conv1").unwrap_err();
        assert!(err.to_string().contains("stage0.block1.conv1"), "{err}");
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 3], vec![-1.0, 2.5, 0.0]).unwrap(), "x");
        let y = tape.relu(x, "relu");
        assert_eq!(tape.value(y).data(), &[0.0, 2.5, 0.0]);
    }

    #[test]
    fn maxpool_simple() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), "x");
        let y = tape.maxpool2(x, "pool").unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    }

    #[test]
    fn maxpool_rejects_tiny_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 2]), "x");
        assert!(tape.maxpool2(x, "pool").is_err());
    }

    #[test]
    fn maxpool_drops_odd_edge() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 5, 5, 2], 3.5), "x");
        let y = tape.maxpool2(x, "pool").unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(), "x");
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(eye, "w");
        let b = tape.leaf(Tensor::zeros(&[3]), "b");
        let y = tape.dense(x, w, b, "dense").unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dense_zero_weight_returns_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 3], 9.0), "x");
        let w = tape.leaf(Tensor::zeros(&[3, 2]), "w");
        let b = tape.leaf(Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap(), "b");
        let y = tape.dense(x, w, b, "dense").unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_q() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 10]), "logits");
        let loss = tape.softmax_cross_entropy(logits, &[0, 5, 9]).unwrap();
        assert!((tape.value(loss).data()[0] - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_loss_vanishes() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(&[1, 4]);
        t.data_mut()[2] = 60.0;
        let logits = tape.leaf(t, "logits");
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 4]), "logits");
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[4]),
            Err(Error::LabelOutOfRange { label: 4, n_classes: 4 })
        ));
    }

    #[test]
    fn grad_of_unused_parameter_is_absent() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 3]), "logits");
        let unused = tape.leaf(Tensor::filled(&[4], 1.0), "unused");
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert!(grads.get(logits).is_some());
    }

    #[test]
    fn batchnorm_constant_channel_maps_to_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 3, 3, 2], 4.2), "x");
        let g = tape.leaf(Tensor::filled(&[2], 1.0), "g");
        let b = tape.leaf(Tensor::filled(&[2], 0.0), "b");
        let (y, stats) = tape.batchnorm_train(x, g, b, 1e-5, "bn").unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-9));
        assert!((stats.mean[0] - 4.2).abs() < 1e-12);
        assert!(stats.var[0].abs() < 1e-12);
    }

    #[test]
    fn batchnorm_zero_gamma_returns_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::rand_uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut crate::rng::rng_from(1, "t", 0)), "x");
        let g = tape.leaf(Tensor::zeros(&[2]), "g");
        let b = tape.leaf(Tensor::filled(&[2], 5.0), "b");
        let (y, _) = tape.batchnorm_train(x, g, b, 1e-5, "bn").unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }
}
