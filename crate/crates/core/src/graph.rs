//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] visits each node exactly once, in reverse.

use crate::error::{Error, Result};
use crate::ops::{self, Conv1dGeom, Conv2dGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom },
    Conv1dCausal { x: Var, w: Var, b: Var, geom: Conv1dGeom },
    AvgPoolSpatial(Var),
    MaxPoolSpatial { x: Var, argmax: Vec<usize> },
    ChannelMean(Var),
    ChannelMax { x: Var, argmax: Vec<usize> },
    HeightMean(Var),
    Linear { x: Var, w: Var, b: Var },
    ProjectTime { x: Var, w: Var, b: Var },
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    MulBroadcast { x: Var, gate: Var },
    Softmax(Var),
    Dropout { x: Var, mask: Vec<T> },
    Concat(Vec<Var>),
    Reshape(Var),
    Scale(Var, T),
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<T> },
    /// Scalar whose gradient with respect to `x` was computed alongside the
    /// forward value (used by the CTC loss).
    ScalarWithGrad { x: Var, grad: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1dCausal { .. } => "conv1d_causal",
            Op::AvgPoolSpatial(_) => "global_avgpool_spatial",
            Op::MaxPoolSpatial { .. } => "global_maxpool_spatial",
            Op::ChannelMean(_) => "channel_mean",
            Op::ChannelMax { .. } => "channel_max",
            Op::HeightMean(_) => "height_mean",
            Op::Linear { .. } => "linear",
            Op::ProjectTime { .. } => "project_logits",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::MulBroadcast { .. } => "mul_broadcast",
            Op::Softmax(_) => "softmax_lastaxis",
            Op::Dropout { .. } => "dropout",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::ScalarWithGrad { .. } => "scalar_with_grad",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Removes and returns a leaf's gradient.
    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Recorded computation. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let geom = Conv2dGeom::new(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let geom = Conv1dGeom::new(self.value(x), self.value(w), self.value(b), dilation)?;
        let out = ops::conv1d_causal(self.value(x), self.value(w), self.value(b), dilation)?;
        self.push(out, Op::Conv1dCausal { x, w, b, geom }, &[x, w, b])
    }

    pub fn global_avgpool_spatial(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avgpool_spatial(self.value(x))?;
        self.push(out, Op::AvgPoolSpatial(x), &[x])
    }

    pub fn global_maxpool_spatial(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::global_maxpool_spatial(self.value(x))?;
        self.push(out, Op::MaxPoolSpatial { x, argmax }, &[x])
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let out = ops::channel_mean(self.value(x))?;
        self.push(out, Op::ChannelMean(x), &[x])
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::channel_max(self.value(x))?;
        self.push(out, Op::ChannelMax { x, argmax }, &[x])
    }

    /// `(F_avg^s, F_max^s)`: mean and max across channels.
    pub fn channel_pool(&mut self, x: Var) -> Result<(Var, Var)> {
        Ok((self.channel_mean(x)?, self.channel_max(x)?))
    }

    pub fn height_mean(&mut self, x: Var) -> Result<Var> {
        let out = ops::height_mean(self.value(x))?;
        self.push(out, Op::HeightMean(x), &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(out, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn project_time(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::project_time(self.value(x), self.value(w), self.value(b))?;
        self.push(out, Op::ProjectTime { x, w, b }, &[x, w, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let out = ops::mul_broadcast(self.value(x), self.value(gate))?;
        self.push(out, Op::MulBroadcast { x, gate }, &[x, gate])
    }

    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_lastaxis(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Inverted dropout. In eval mode the input handle is returned unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !training {
            ops::dropout(self.value(x), rate, false, seed)?;
            return Ok(x);
        }
        let mask = ops::dropout_mask::<T>(self.value(x).len(), rate, seed)?;
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&tensors)?;
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// `sum(weights * x)` for a fixed weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let s = self.value(x).data().iter().zip(weights.data()).fold(T::zero(), |a, (&v, &w)| a + v * w);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.data().to_vec() }, &[x])
    }

    /// Records a scalar `value` whose gradient with respect to `x` is `grad`.
    pub fn scalar_with_grad(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::InvalidArgument("precomputed gradient has the wrong length".into()));
        }
        self.push(Tensor::scalar(value), Op::ScalarWithGrad { x, grad }, &[x])
    }

    /// Smallest distance of any recorded ReLU input from zero, or of any
    /// recorded max from the runner-up value. Finite differences are only
    /// meaningful when this exceeds the perturbation size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::MaxPoolSpatial { x, .. } => {
                    let s = self.shape(*x);
                    let hw = s[2] * s[3];
                    for plane in self.value(*x).data().chunks_exact(hw) {
                        margin = margin.min(top_two_gap(plane.iter().copied()));
                    }
                }
                Op::ChannelMax { x, .. } => {
                    let s = self.shape(*x);
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let data = self.value(*x).data();
                    for n in 0..s[0] {
                        for pix in 0..hw {
                            let vals = (0..c).map(|ch| data[(n * c + ch) * hw + pix]);
                            margin = margin.min(top_two_gap(vals));
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Which side of every kink the recorded values sit on: the sign of each
    /// ReLU input and the winner of each max. Two points with equal patterns
    /// lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => pattern.extend(self.value(*x).data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::MaxPoolSpatial { argmax, .. } | Op::ChannelMax { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every leaf
    /// created with [`Graph::param`]. Fan-out contributions accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut out: Vec<Option<Tensor<T>>> = Vec::new();
        out.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[idx] = Some(Tensor::new(node.value.shape(), gout)?);
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, contribution: Vec<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = ops::conv2d_backward(geom, val(*x).data(), val(*w).data(), gout, needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Conv1dCausal { x, w, b, geom } => {
                let (dx, dw, db) =
                    ops::conv1d_causal_backward(geom, val(*x).data(), val(*w).data(), gout, needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::AvgPoolSpatial(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let scale = T::from_f64(1.0 / hw as f64);
                let dx = gout.iter().flat_map(|&g| std::iter::repeat_n(g * scale, hw)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPoolSpatial { x, argmax } | Op::ChannelMax { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&i, &g) in argmax.iter().zip(gout) {
                    dx[i] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelMean(x) => {
                let s = val(*x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let scale = T::from_f64(1.0 / c as f64);
                let mut dx = Vec::with_capacity(val(*x).len());
                for n in 0..s[0] {
                    for _ in 0..c {
                        dx.extend(gout[n * hw..(n + 1) * hw].iter().map(|&g| g * scale));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::HeightMean(x) => {
                let s = val(*x).shape();
                let (h, w) = (s[2], s[3]);
                let scale = T::from_f64(1.0 / h as f64);
                let mut dx = Vec::with_capacity(val(*x).len());
                for row in gout.chunks_exact(w) {
                    for _ in 0..h {
                        dx.extend(row.iter().map(|&g| g * scale));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(val(*x), val(*w), gout, needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::ProjectTime { x, w, b } => {
                let (dx, dw, db) = ops::project_time_backward(val(*x), val(*w), gout, needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Sigmoid(x) => {
                let dx = node.value.data().iter().zip(gout).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.to_vec());
                self.accumulate(grads, *b, gout.to_vec());
            }
            Op::MulBroadcast { x, gate } => {
                let xv = val(*x);
                let gv = val(*gate);
                if needs(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    ops::for_each_broadcast(xv.shape(), gv.shape(), |i, j| dx[i] = gout[i] * gv.data()[j]);
                    self.accumulate(grads, *x, dx);
                }
                if needs(*gate) {
                    let mut dg = vec![T::zero(); gv.len()];
                    ops::for_each_broadcast(xv.shape(), gv.shape(), |i, j| dg[j] += gout[i] * xv.data()[i]);
                    self.accumulate(grads, *gate, dg);
                }
            }
            Op::Softmax(x) => {
                let last = *node.value.shape().last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(gout.len());
                for (y, g) in node.value.data().chunks_exact(last).zip(gout.chunks_exact(last)) {
                    let dot = y.iter().zip(g).fold(T::zero(), |a, (&yi, &gi)| a + yi * gi);
                    dx.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = gout.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[1] * inner;
                    let mut dp = Vec::with_capacity(block * s[0]);
                    for n in 0..s[0] {
                        dp.extend_from_slice(&gout[n * total + offset..n * total + offset + block]);
                    }
                    self.accumulate(grads, p, dp);
                    offset += block;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gout.to_vec());
            }
            Op::Scale(x, factor) => {
                let dx = gout.iter().map(|&g| g * *factor).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, vec![gout[0]; val(*x).len()]);
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.iter().map(|&w| w * gout[0]).collect());
            }
            Op::ScalarWithGrad { x, grad } => {
                self.accumulate(grads, *x, grad.iter().map(|&v| v * gout[0]).collect());
            }
        }
    }
}

fn top_two_gap<T: Scalar>(values: impl Iterator<Item = T>) -> f64 {
    let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in values.map(Scalar::as_f64) {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        best - second
    }
}
