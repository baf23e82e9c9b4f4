//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients into
//! each node's tensor `grad` buffer. Parameters enter as leaves; after the
//! backward pass their gradients are read with [`Graph::grad`].

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds, used to name backward rules in diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Slice,
    Softmax,
    LogSoftmax,
    SoftmaxCrossEntropy,
    Mean,
    NegLogAt,
    Pick,
    Add,
    Scale,
    Dot,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::MaxPool2,
        OpKind::GlobalAvgPool,
        OpKind::Slice,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Mean,
        OpKind::NegLogAt,
        OpKind::Pick,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Dot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Slice => "slice",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Mean => "mean",
            OpKind::NegLogAt => "neg_log_at",
            OpKind::Pick => "pick",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Dot => "dot",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Perturbs the backward rule of `kind` on this thread. Test fixture for the
/// gradient-check suite; pass `None` to restore correct rules.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    FAULT.with(|f| f.set(kind));
}

enum Op<S> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    MaxPool2 { x: Var, idx: Vec<usize> },
    GlobalAvgPool(Var),
    Slice { x: Var, top: usize, left: usize },
    Softmax(Var),
    LogSoftmax(Var),
    SoftmaxCrossEntropy { logits: Var, label: usize, probs: Vec<S> },
    Mean(Vec<Var>),
    NegLogAt { x: Var, index: usize },
    Pick { x: Var, index: usize },
    Add(Var, Var),
    Scale(Var, S),
    Dot(Var, Vec<S>),
}

impl<S> Op<S> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Slice { .. } => OpKind::Slice,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Mean(_) => OpKind::Mean,
            Op::NegLogAt { .. } => OpKind::NegLogAt,
            Op::Pick { .. } => OpKind::Pick,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Dot(..) => OpKind::Dot,
        })
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t` (its gradient buffer is dropped).
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        let mut v = t.clone();
        v.clear_grad();
        self.push(v, Op::Leaf)
    }

    pub fn leaf_owned(&mut self, mut t: Tensor<S>) -> Var {
        t.clear_grad();
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cross-correlation of a `C×H×W` input with `O×C×Kh×Kw` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let ks = self.value(w).shape();
        let [o, ic, kh, kw] = ks[..] else {
            return Err(Error::shape("conv2d", format!("kernels must be rank 4, got {ks:?}")));
        };
        if ic != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: kernels expect {ic}, input has {c}"),
            ));
        }
        if self.value(b).len() != o {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != output channels {o}", self.value(b).len()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape("conv2d", format!("height {h} + 2*{pad} < kernel height {kh}")));
        }
        if wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("width {wd} + 2*{pad} < kernel width {kw}")));
        }
        let geom = ConvGeom {
            in_c: c,
            in_h: h,
            in_w: wd,
            out_c: o,
            kh,
            kw,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).values(), self.value(w).values(), self.value(b).values());
        let t = Tensor::new(vec![o, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(S::zero()));
        self.push(t, Op::Relu(x))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h < 2 || w < 2 {
            return Err(Error::shape("maxpool2", format!("{h}×{w} is smaller than the 2×2 window")));
        }
        let (out, idx) = kernels::maxpool2_forward(c, h, w, self.value(x).values());
        let t = Tensor::new(vec![c, h / 2, w / 2], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, idx }))
    }

    /// `C×H×W` to `C×1×1` by averaging each channel.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let inv = S::one() / S::of(hw as f64);
        let vals = self.value(x).values();
        let out = (0..c)
            .map(|ch| vals[ch * hw..(ch + 1) * hw].iter().copied().sum::<S>() * inv)
            .collect();
        let t = Tensor::new(vec![c, 1, 1], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x)))
    }

    /// Spatial sub-grid `[top, top+h) × [left, left+w)` of every channel.
    pub fn slice(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (c, xh, xw) = self.value(x).chw()?;
        if h == 0 || w == 0 || top + h > xh || left + w > xw {
            return Err(Error::shape("slice", format!("window {h}×{w} at ({top},{left}) outside {xh}×{xw}")));
        }
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for r in top..top + h {
                let off = (ch * xh + r) * xw + left;
                out.extend_from_slice(&src[off..off + w]);
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(t, Op::Slice { x, top, left }))
    }

    /// Softmax over every entry of `x`, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let p = softmax_values(t.values());
        let t = Tensor::new(t.shape().to_vec(), p)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        let lse = log_sum_exp(t.values());
        let out = t.values().iter().map(|&v| v - lse).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(x)))
    }

    /// `-log softmax(logits)[label]` as a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        if label >= t.len() {
            return Err(Error::Label { label, classes: t.len() });
        }
        if !t.is_finite() {
            return Err(Error::NonFinite {
                op: "softmax_cross_entropy",
            });
        }
        let lse = log_sum_exp(t.values());
        let loss = lse - t.values()[label];
        let probs = softmax_values(t.values());
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, label, probs }))
    }

    /// Element-wise arithmetic mean of equally shaped tensors.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Invalid("mean of an empty list".into()));
        };
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![S::zero(); self.value(first).len()];
        for &x in xs {
            let t = self.value(x);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("mean", format!("{:?} vs {shape:?}", t.shape())));
            }
            acc.iter_mut().zip(t.values()).for_each(|(a, &v)| *a += v);
        }
        let inv = S::one() / S::of(xs.len() as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(self.push(Tensor::new(shape, acc)?, Op::Mean(xs.to_vec())))
    }

    /// `-ln x[index]`, for losses read off an already normalized distribution.
    pub fn neg_log_at(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(Error::Label {
                label: index,
                classes: t.len(),
            });
        }
        let v = t.values()[index];
        Ok(self.push(Tensor::scalar(-v.ln()), Op::NegLogAt { x, index }))
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(Error::shape("pick", format!("index {index} of {}", t.len())));
        }
        let v = t.values()[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    /// Scalar `Σ_i coeffs[i]·x[i]` with constant coefficients.
    pub fn dot(&mut self, x: Var, coeffs: Vec<S>) -> Result<Var> {
        let t = self.value(x);
        if coeffs.len() != t.len() {
            return Err(Error::shape("dot", format!("{} coefficients for {} values", coeffs.len(), t.len())));
        }
        let v = t.values().iter().zip(&coeffs).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot(x, coeffs)))
    }

    /// Backpropagates from a scalar node with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root must be a scalar; use backward_with"));
        }
        self.backward_with(root, vec![S::one()])
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<S>) -> Result<()> {
        if seed.len() != self.value(root).len() {
            return Err(Error::shape("backward", "seed length differs from root size"));
        }
        self.nodes[root.0].value.accumulate_grad(&seed);
        let fault = FAULT.with(|f| f.get());
        for i in (0..=root.0).rev() {
            let Some(mut g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if fault.is_some() && node.op.kind() == fault {
                g.iter_mut().for_each(|v| *v *= S::of(1.01));
            }
            backprop(before, node, &g);
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }
}

fn grad_buf<S: Scalar>(nodes: &mut [Node<S>], v: Var) -> &mut [S] {
    let t = &mut nodes[v.0].value;
    if t.grad().is_none() {
        let n = t.len();
        t.set_grad(vec![S::zero(); n]);
    }
    t.grad_mut().unwrap()
}

fn backprop<S: Scalar>(before: &mut [Node<S>], node: &Node<S>, g: &[S]) {
    let out = node.value.values();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            // x, w, b are distinct nodes earlier on the tape.
            let xv = before[x.0].value.values().to_vec();
            let wv = before[w.0].value.values().to_vec();
            let mut dx = vec![S::zero(); xv.len()];
            let mut dw = vec![S::zero(); wv.len()];
            let mut db = vec![S::zero(); geom.out_c];
            kernels::conv2d_backward(geom, &xv, &wv, g, Some(&mut dx), Some(&mut dw), Some(&mut db));
            add_into(grad_buf(before, *x), &dx);
            add_into(grad_buf(before, *w), &dw);
            add_into(grad_buf(before, *b), &db);
        }
        Op::Relu(x) => {
            let dx: Vec<S> = out
                .iter()
                .zip(g)
                .map(|(&y, &d)| if y > S::zero() { d } else { S::zero() })
                .collect();
            add_into(grad_buf(before, *x), &dx);
        }
        Op::MaxPool2 { x, idx } => {
            let buf = grad_buf(before, *x);
            for (&i, &d) in idx.iter().zip(g) {
                buf[i] += d;
            }
        }
        Op::GlobalAvgPool(x) => {
            let n = before[x.0].value.len();
            let c = g.len();
            let hw = n / c;
            let inv = S::one() / S::of(hw as f64);
            let buf = grad_buf(before, *x);
            for ch in 0..c {
                let d = g[ch] * inv;
                buf[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += d);
            }
        }
        Op::Slice { x, top, left } => {
            let (c, xh, xw) = before[x.0].value.chw().expect("slice source is rank 3");
            let (_, h, w) = node.value.chw().expect("slice output is rank 3");
            let buf = grad_buf(before, *x);
            for ch in 0..c {
                for r in 0..h {
                    let src = (ch * h + r) * w;
                    let dst = (ch * xh + top + r) * xw + left;
                    add_into(&mut buf[dst..dst + w], &g[src..src + w]);
                }
            }
        }
        Op::Softmax(x) => {
            let dot: S = out.iter().zip(g).map(|(&p, &d)| p * d).sum();
            let dx: Vec<S> = out.iter().zip(g).map(|(&p, &d)| p * (d - dot)).collect();
            add_into(grad_buf(before, *x), &dx);
        }
        Op::LogSoftmax(x) => {
            let total: S = g.iter().copied().sum();
            let dx: Vec<S> = out.iter().zip(g).map(|(&lp, &d)| d - lp.exp() * total).collect();
            add_into(grad_buf(before, *x), &dx);
        }
        Op::SoftmaxCrossEntropy { logits, label, probs } => {
            let buf = grad_buf(before, *logits);
            for (i, (b, &p)) in buf.iter_mut().zip(probs).enumerate() {
                let y = if i == *label { S::one() } else { S::zero() };
                *b += g[0] * (p - y);
            }
        }
        Op::Mean(xs) => {
            let inv = S::one() / S::of(xs.len() as f64);
            let d: Vec<S> = g.iter().map(|&v| v * inv).collect();
            for x in xs {
                add_into(grad_buf(before, *x), &d);
            }
        }
        Op::NegLogAt { x, index } => {
            let v = before[x.0].value.values()[*index];
            grad_buf(before, *x)[*index] -= g[0] / v;
        }
        Op::Pick { x, index } => {
            grad_buf(before, *x)[*index] += g[0];
        }
        Op::Add(a, b) => {
            add_into(grad_buf(before, *a), g);
            add_into(grad_buf(before, *b), g);
        }
        Op::Scale(x, s) => {
            let d: Vec<S> = g.iter().map(|&v| v * *s).collect();
            add_into(grad_buf(before, *x), &d);
        }
        Op::Dot(x, coeffs) => {
            let d: Vec<S> = coeffs.iter().map(|&c| c * g[0]).collect();
            add_into(grad_buf(before, *x), &d);
        }
    }
}

#[inline]
fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    m + xs.iter().map(|&v| (v - m).exp()).sum::<S>().ln()
}

pub(crate) fn softmax_values<S: Scalar>(xs: &[S]) -> Vec<S> {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = xs.iter().map(|&v| (v - m).exp()).collect();
    let z: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_dimension() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros(&[2, 4, 4]));
        let w = g.leaf(&Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.leaf(&Tensor::zeros(&[1]));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = crate::rng::Rng::seed(1);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros(&[1, 3, 3]));
        let w = g.leaf(&Tensor::randn(&[4, 1, 3, 3], 1.0, &mut rng));
        let b = g.leaf(&Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert!(g.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = crate::rng::Rng::seed(2);
        let input = Tensor::<f64>::randn(&[1, 5, 6], 1.0, &mut rng);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let mut g = Graph::new();
        let x = g.leaf(&input);
        let w = g.leaf(&t(&[1, 1, 3, 3], &k));
        let b = g.leaf(&Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).values(), input.values());
    }

    #[test]
    fn softmax_known_values() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 2, 2], &[0.0, 2f64.ln(), 3f64.ln(), 4f64.ln()]));
        let p = g.softmax(x).unwrap();
        for (a, b) in g.value(p).values().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[0.0, f64::NAN]));
        assert!(matches!(g.softmax(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_scalar_oracle() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let l = g.softmax_cross_entropy(x, 2).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = -(3f64.exp() / denom).ln();
        assert!((g.value(l).values()[0] - expected).abs() < 1e-12);
        // ≈ 0.40760596
        assert!((expected - 0.407_605_96).abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::<f64>::full(&[10], 0.3));
        for label in 0..10 {
            let l = g.softmax_cross_entropy(x, label).unwrap();
            assert!((g.value(l).values()[0] - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_saturates_to_zero() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[0.0, 0.0, 800.0]));
        let l = g.softmax_cross_entropy(x, 2).unwrap();
        assert!(g.value(l).values()[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_label() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        assert!(matches!(g.softmax_cross_entropy(x, 3), Err(Error::Label { label: 3, classes: 3 })));
    }

    #[test]
    fn backward_through_shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let s = g.dot(y, vec![3.0, 5.0]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 10.0]);
    }
}
