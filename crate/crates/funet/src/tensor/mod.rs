//! Dense tensors on a reverse-mode autodiff tape.
//!
//! Activations use the canonical `N x C x H x W` layout, convolution kernels
//! `Cout x Cin x Kh x Kw`. All values are double precision. Forward
//! operations append a record to the [`Tape`]; [`Tape::backward`] replays the
//! records in reverse and accumulates gradients into every tensor that
//! `requires_grad`.

mod conv;
mod norm;
#[cfg(test)]
mod tests;

pub use norm::{BnState, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Padding flavor for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-fill border so output spatial dims equal input spatial dims.
    Same,
    /// No padding; output shrinks by `K-1` per axis.
    Valid,
}

/// Train/eval switch for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense n-dimensional double tensor with an optional gradient slot.
///
/// Invariants: `shape.iter().product() == data.len()`, and `grad`, when
/// present, has the same length as `data`. Non-finite values are a detectable
/// error state: [`Tensor::check_finite`] scans for them and the training loop
/// aborts on a non-finite loss.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("product({shape:?})"),
                numel,
                data.len(),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", "extent", "positive", format!("{shape:?}")));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{context}: non-finite value {} at flat index {i} (shape {:?})",
                self.data[i], self.shape
            )));
        }
        Ok(())
    }
}

/// Batch-norm intermediates saved for the backward pass.
#[derive(Debug)]
struct BnSaved {
    /// Normalized input, same shape as the op's input.
    x_hat: Vec<f64>,
    /// Per-channel `1/sqrt(var + eps)`.
    inv_std: Vec<f64>,
}

/// One recorded operation: how the node's tensor was produced.
#[derive(Debug)]
enum Op {
    Leaf,
    Relu {
        input: TensorId,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Sum {
        input: TensorId,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        padding: Padding,
    },
    MaxPool2 {
        input: TensorId,
        /// Flat input index of the window maximum, one per output element.
        argmax: Vec<usize>,
    },
    UpConv2 {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
    },
    BatchNormTrain {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        saved: BnSaved,
    },
    BatchNormEval {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// Per-channel running mean and `1/sqrt(running_var + eps)` snapshot.
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: TensorId,
        /// Per-element keep mask, already scaled by `1/(1-rate)`.
        mask: Vec<f64>,
    },
    ConcatChannels {
        a: TensorId,
        b: TensorId,
    },
    SoftmaxChannels {
        input: TensorId,
    },
    GatherChannels {
        probs: TensorId,
        labels: Vec<usize>,
    },
    WeightedNll {
        p_true: TensorId,
        /// Per-pixel loss weights, constant for backward.
        weights: Vec<f64>,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Probability floor inside the weighted negative-log-likelihood.
pub const LOG_CLAMP: f64 = 1e-12;

/// Ordered record of tensors and the operations that produced them.
///
/// Node ids are append-ordered, so every record's inputs precede it and one
/// reverse sweep visits each record exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = requires_grad;
        Ok(self.leaf(t))
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn output(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[TensorId], op: Op) -> TensorId {
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].tensor.requires_grad);
        let tensor = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(tensor, op)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Clear every gradient slot on the tape.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn dims4(&self, id: TensorId, op: &'static str) -> Result<[usize; 4]> {
        let s = self.shape(id);
        if s.len() != 4 {
            return Err(Error::shape(op, "rank", 4, s.len()));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    // ── Elementwise and reduction ops ───────────────────────────────

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        // (v + |v|) / 2 equals max(v, 0) bit for bit on ordinary values but,
        // unlike f64::max, lets NaN through so numerical blowups stay
        // visible downstream.
        let data: Vec<f64> = self.data(input).iter().map(|&v| 0.5 * (v + v.abs())).collect();
        self.output(self.shape(input).to_vec(), data, &[input], Op::Relu { input })
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::shape(
                "add",
                "shape",
                format!("{:?}", self.shape(lhs)),
                format!("{:?}", self.shape(rhs)),
            ));
        }
        let data: Vec<f64> = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.output(self.shape(lhs).to_vec(), data, &[lhs, rhs], Op::Add { lhs, rhs }))
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::shape(
                "mul",
                "shape",
                format!("{:?}", self.shape(lhs)),
                format!("{:?}", self.shape(rhs)),
            ));
        }
        let data: Vec<f64> = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(a, b)| a * b)
            .collect();
        Ok(self.output(self.shape(lhs).to_vec(), data, &[lhs, rhs], Op::Mul { lhs, rhs }))
    }

    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.data(input).iter().sum();
        self.output(vec![1], vec![s], &[input], Op::Sum { input })
    }

    // ── Pooling, dropout, concat ────────────────────────────────────

    /// 2x2 max pooling with stride 2. Ties go to the first (row-major)
    /// maximum.
    pub fn max_pool2(&mut self, input: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = self.dims4(input, "max_pool2")?;
        if h % 2 != 0 {
            return Err(Error::shape("max_pool2", "H", "even", h));
        }
        if w % 2 != 0 {
            return Err(Error::shape("max_pool2", "W", "even", w));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(input);
        let mut data = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; data.len()];
        let mut o = 0;
        for nn in 0..n {
            for cc in 0..c {
                let plane = (nn * c + cc) * h * w;
                for y in 0..oh {
                    for x in 0..ow {
                        let base = plane + (2 * y) * w + 2 * x;
                        let mut best = src[base];
                        let mut best_i = base;
                        for &cand in &[base + 1, base + w, base + w + 1] {
                            if src[cand] > best {
                                best = src[cand];
                                best_i = cand;
                            }
                        }
                        data[o] = best;
                        argmax[o] = best_i;
                        o += 1;
                    }
                }
            }
        }
        Ok(self.output(vec![n, c, oh, ow], data, &[input], Op::MaxPool2 { input, argmax }))
    }

    /// Inverted dropout. Train mode zeroes each element with probability
    /// `rate` and scales survivors by `1/(1-rate)`; eval mode is the
    /// identity.
    pub fn dropout<R: Rng>(
        &mut self,
        input: TensorId,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - rate);
        let n = self.data(input).len();
        let mut mask = Vec::with_capacity(n);
        for _ in 0..n {
            let keep = rng.random::<f64>() >= rate;
            mask.push(if keep { scale } else { 0.0 });
        }
        let data: Vec<f64> = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.output(self.shape(input).to_vec(), data, &[input], Op::Dropout { input, mask }))
    }

    /// Concatenate along the channel axis: `a`'s channels first, then `b`'s.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let [na, ca, ha, wa] = self.dims4(a, "concat_channels")?;
        let [nb, cb, hb, wb] = self.dims4(b, "concat_channels")?;
        if na != nb {
            return Err(Error::shape("concat_channels", "N", na, nb));
        }
        if ha != hb || wa != wb {
            return Err(Error::shape(
                "concat_channels",
                "HxW",
                format!("{ha}x{wa}"),
                format!("{hb}x{wb}"),
            ));
        }
        let hw = ha * wa;
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&db[n * cb * hw..(n + 1) * cb * hw]);
        }
        Ok(self.output(vec![na, ca + cb, ha, wa], data, &[a, b], Op::ConcatChannels { a, b }))
    }

    // ── Softmax and loss kernels ────────────────────────────────────

    /// Per-pixel softmax over the channel axis, stabilized by max
    /// subtraction.
    pub fn softmax_channels(&mut self, logits: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = self.dims4(logits, "softmax_channels")?;
        let hw = h * w;
        let src = self.data(logits);
        let mut data = vec![0.0; src.len()];
        for nn in 0..n {
            let base = nn * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for cc in 0..c {
                    m = m.max(src[base + cc * hw + p]);
                }
                let mut z = 0.0;
                for cc in 0..c {
                    let e = (src[base + cc * hw + p] - m).exp();
                    data[base + cc * hw + p] = e;
                    z += e;
                }
                for cc in 0..c {
                    data[base + cc * hw + p] /= z;
                }
            }
        }
        Ok(self.output(
            vec![n, c, h, w],
            data,
            &[logits],
            Op::SoftmaxChannels { input: logits },
        ))
    }

    /// Gather the per-pixel probability of the labeled class: output
    /// `[N, H, W]` with `out[n,y,x] = probs[n, labels[n,y,x], y, x]`.
    pub fn gather_channels(&mut self, probs: TensorId, labels: &[usize]) -> Result<TensorId> {
        let [n, c, h, w] = self.dims4(probs, "gather_channels")?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape("gather_channels", "labels", n * hw, labels.len()));
        }
        let src = self.data(probs);
        let mut data = vec![0.0; n * hw];
        for nn in 0..n {
            for p in 0..hw {
                let l = labels[nn * hw + p];
                if l >= c {
                    return Err(Error::LabelRange {
                        label: l,
                        num_classes: c,
                        n: nn,
                        y: p / w,
                        x: p % w,
                    });
                }
                data[nn * hw + p] = src[(nn * c + l) * hw + p];
            }
        }
        Ok(self.output(
            vec![n, h, w],
            data,
            &[probs],
            Op::GatherChannels {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Weighted negative log-likelihood, averaged over all pixels:
    /// `E = -(1/M) * sum_i w_i * ln(max(p_i, 1e-12))` with `M = N*H*W`.
    ///
    /// The weights are constants: no gradient flows through them.
    pub fn weighted_nll(&mut self, p_true: TensorId, weights: &[f64]) -> Result<TensorId> {
        let p = self.data(p_true);
        if weights.len() != p.len() {
            return Err(Error::shape("weighted_nll", "weights", p.len(), weights.len()));
        }
        let m = p.len() as f64;
        let e = -p
            .iter()
            .zip(weights)
            // Clamp only genuine near-zero probabilities; a NaN must reach
            // the loss value rather than be silently replaced.
            .map(|(&pi, &wi)| wi * (if pi < LOG_CLAMP { LOG_CLAMP } else { pi }).ln())
            .sum::<f64>()
            / m;
        Ok(self.output(
            vec![1],
            vec![e],
            &[p_true],
            Op::WeightedNll {
                p_true,
                weights: weights.to_vec(),
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Gradients are accumulated
    /// additively into every `requires_grad` tensor; leaves unreachable from
    /// the loss end up with zero gradient. Call [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = Vec::new();
        scratch.resize_with(self.nodes.len(), || None);
        scratch[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            {
                let t = &mut self.nodes[i].tensor;
                if t.requires_grad {
                    let slot = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, gi) in slot.iter_mut().zip(&g) {
                        *s += gi;
                    }
                }
            }
            self.backprop_node(i, &g, &mut scratch);
        }

        for node in &mut self.nodes {
            let t = &mut node.tensor;
            if t.requires_grad && t.grad.is_none() {
                t.grad = Some(vec![0.0; t.data.len()]);
            }
        }
        Ok(())
    }

    fn wants_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn acc<'a>(
        &self,
        scratch: &'a mut [Option<Vec<f64>>],
        id: TensorId,
    ) -> &'a mut [f64] {
        let len = self.nodes[id.0].tensor.data.len();
        scratch[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Relu { input } => {
                if self.wants_grad(*input) {
                    let x = self.data(*input);
                    let dst = self.acc(scratch, *input);
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            dst[j] += g[j];
                        }
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                for &id in &[*lhs, *rhs] {
                    if self.wants_grad(id) {
                        let dst = self.acc(scratch, id);
                        for j in 0..g.len() {
                            dst[j] += g[j];
                        }
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                if self.wants_grad(lhs) {
                    let other = self.data(rhs);
                    let dst = self.acc(scratch, lhs);
                    for j in 0..g.len() {
                        dst[j] += g[j] * other[j];
                    }
                }
                if self.wants_grad(rhs) {
                    let other = self.data(lhs);
                    let dst = self.acc(scratch, rhs);
                    for j in 0..g.len() {
                        dst[j] += g[j] * other[j];
                    }
                }
            }
            Op::Sum { input } => {
                if self.wants_grad(*input) {
                    let dst = self.acc(scratch, *input);
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                conv::conv2d_backward(self, *input, *kernel, *bias, *padding, g, scratch);
            }
            Op::MaxPool2 { input, argmax } => {
                if self.wants_grad(*input) {
                    let dst = self.acc(scratch, *input);
                    for (o, &src_i) in argmax.iter().enumerate() {
                        dst[src_i] += g[o];
                    }
                }
            }
            Op::UpConv2 {
                input,
                kernel,
                bias,
            } => {
                conv::up_conv2_backward(self, *input, *kernel, *bias, g, scratch);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            } => {
                norm::batch_norm_train_backward(self, *input, *gamma, *beta, saved, g, scratch);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                norm::batch_norm_eval_backward(self, *input, *gamma, *beta, mean, inv_std, g, scratch);
            }
            Op::Dropout { input, mask } => {
                if self.wants_grad(*input) {
                    let dst = self.acc(scratch, *input);
                    for j in 0..g.len() {
                        dst[j] += g[j] * mask[j];
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = self.dims4(*a, "concat_channels").expect("recorded shape");
                let cb = self.shape(*b)[1];
                let hw = h * w;
                if self.wants_grad(*a) {
                    let dst = self.acc(scratch, *a);
                    for nn in 0..n {
                        let src = nn * (ca + cb) * hw;
                        let d = nn * ca * hw;
                        for j in 0..ca * hw {
                            dst[d + j] += g[src + j];
                        }
                    }
                }
                if self.wants_grad(*b) {
                    let dst = self.acc(scratch, *b);
                    for nn in 0..n {
                        let src = nn * (ca + cb) * hw + ca * hw;
                        let d = nn * cb * hw;
                        for j in 0..cb * hw {
                            dst[d + j] += g[src + j];
                        }
                    }
                }
            }
            Op::SoftmaxChannels { input } => {
                if self.wants_grad(*input) {
                    let [n, c, h, w] = self.dims4(*input, "softmax_channels").expect("recorded shape");
                    let hw = h * w;
                    let y = self.data(TensorId(i));
                    let dst = self.acc(scratch, *input);
                    for nn in 0..n {
                        let base = nn * c * hw;
                        for p in 0..hw {
                            let mut s = 0.0;
                            for cc in 0..c {
                                let j = base + cc * hw + p;
                                s += g[j] * y[j];
                            }
                            for cc in 0..c {
                                let j = base + cc * hw + p;
                                dst[j] += y[j] * (g[j] - s);
                            }
                        }
                    }
                }
            }
            Op::GatherChannels { probs, labels } => {
                if self.wants_grad(*probs) {
                    let [n, c, h, w] = self.dims4(*probs, "gather_channels").expect("recorded shape");
                    let hw = h * w;
                    let dst = self.acc(scratch, *probs);
                    for nn in 0..n {
                        for p in 0..hw {
                            let l = labels[nn * hw + p];
                            dst[(nn * c + l) * hw + p] += g[nn * hw + p];
                        }
                    }
                }
            }
            Op::WeightedNll { p_true, weights } => {
                if self.wants_grad(*p_true) {
                    let p = self.data(*p_true);
                    let m = p.len() as f64;
                    let dst = self.acc(scratch, *p_true);
                    for j in 0..p.len() {
                        if p[j] > LOG_CLAMP {
                            dst[j] -= g[0] * weights[j] / (m * p[j]);
                        }
                    }
                }
            }
        }
    }
}
