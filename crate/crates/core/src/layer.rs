use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of one convolution: `OutC×InC×Kh×Kw` kernels plus per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub kernels: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

/// Graph handles of a layer's weights for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub kernels: Var,
    pub bias: Var,
}

impl<S: Scalar> LayerParams<S> {
    pub fn new(kernels: Tensor<S>, bias: Tensor<S>, stride: usize, padding: usize) -> Result<Self> {
        if kernels.shape().len() != 4 {
            return Err(Error::shape("layer", format!("kernels must be rank 4, got {:?}", kernels.shape())));
        }
        if bias.len() != kernels.shape()[0] {
            return Err(Error::shape("layer", "bias length must equal output channels"));
        }
        if stride == 0 {
            return Err(Error::shape("layer", "stride must be positive"));
        }
        Ok(LayerParams {
            kernels,
            bias,
            stride,
            padding,
        })
    }

    /// Zero-mean Gaussian kernels with variance `gain / fan_in`, zero bias.
    pub fn init(out_c: usize, in_c: usize, k: usize, padding: usize, gain: f64, rng: &mut Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        LayerParams {
            kernels: Tensor::randn(&[out_c, in_c, k, k], (gain / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[out_c]),
            stride: 1,
            padding,
        }
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize, padding: usize) -> Self {
        LayerParams {
            kernels: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
            stride: 1,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }

    pub fn bind(&self, g: &mut Graph<S>) -> BoundLayer {
        BoundLayer {
            kernels: g.leaf(&self.kernels),
            bias: g.leaf(&self.bias),
        }
    }

    pub fn apply(&self, g: &mut Graph<S>, bound: BoundLayer, x: Var) -> Result<Var> {
        g.conv2d(x, bound.kernels, bound.bias, self.stride, self.padding)
    }

    /// Binds the weights and applies the convolution in one go.
    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<(Var, BoundLayer)> {
        let b = self.bind(g);
        Ok((self.apply(g, b, x)?, b))
    }

    /// Adds the gradients recorded on `g` for `bound` into this layer.
    pub fn pull_grads(&mut self, g: &Graph<S>, bound: BoundLayer) {
        if let Some(d) = g.grad(bound.kernels) {
            self.kernels.accumulate_grad(d);
        }
        if let Some(d) = g.grad(bound.bias) {
            self.bias.accumulate_grad(d);
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.weight"), &self.kernels);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.weight"), &mut self.kernels);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    /// Makes sure both tensors carry a gradient buffer, zero if untouched.
    pub fn ensure_grads(&mut self) {
        for t in [&mut self.kernels, &mut self.bias] {
            if t.grad().is_none() {
                let n = t.len();
                t.set_grad(vec![S::zero(); n]);
            }
        }
    }
}

/// Anything that owns a named set of trainable tensors.
pub trait Parameters<S: Scalar> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| {
            let n = t.len();
            t.set_grad(vec![S::zero(); n]);
        });
    }

    fn clear_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.clear_grad());
    }

    fn scale_grads(&mut self, s: S) {
        self.visit_params_mut(&mut |_, t| {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        });
    }
}

impl<S: Scalar> Parameters<S> for LayerParams<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.visit("layer", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.visit_mut("layer", f);
    }
}
