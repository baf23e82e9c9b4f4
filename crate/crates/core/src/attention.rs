//! Per-timestep attention heads and the spatial-softmax glimpse policy.

use crate::error::{Error, Result};
use crate::features::{FeatureMap, GlimpseLocation, RegionSpec};
use crate::graph::{softmax_values, Graph, Var};
use crate::layer::{BoundLayer, LayerParams, Parameters};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Filters in the first head convolution.
pub const HEAD_WIDTH: usize = 64;

/// Two stacked `3×3` convolutions producing a one-channel confidence map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead<S> {
    pub t: usize,
    pub conv1: LayerParams<S>,
    pub conv2: LayerParams<S>,
    pub region: RegionSpec,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub conv1: BoundLayer,
    pub conv2: BoundLayer,
}

impl<S: Scalar> AttentionHead<S> {
    /// He-scaled first layer and a small second layer, so the initial
    /// confidence map is nearly flat and the policy nearly uniform.
    pub fn new(t: usize, in_channels: usize, region: RegionSpec, rng: &mut Rng) -> Self {
        AttentionHead {
            t,
            conv1: LayerParams::init(HEAD_WIDTH, in_channels, 3, 1, 2.0, rng),
            conv2: LayerParams::init(1, HEAD_WIDTH, 3, 1, 0.01, rng),
            region,
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, features: Var) -> Result<(Var, BoundHead)> {
        let c = g.value(features).chw()?.0;
        if c != self.conv1.in_channels() {
            return Err(Error::shape(
                "score_map",
                format!(
                    "feature channels: head {} expects {}, map has {c}",
                    self.t,
                    self.conv1.in_channels()
                ),
            ));
        }
        let (h, b1) = self.conv1.forward(g, features)?;
        let h = g.relu(h);
        let (s, b2) = self.conv2.forward(g, h)?;
        Ok((s, BoundHead { conv1: b1, conv2: b2 }))
    }

    pub fn pull_grads(&mut self, g: &Graph<S>, b: BoundHead) {
        self.conv1.pull_grads(g, b.conv1);
        self.conv2.pull_grads(g, b.conv2);
    }

    pub fn ensure_grads(&mut self) {
        self.conv1.ensure_grads();
        self.conv2.ensure_grads();
    }
}

impl<S: Scalar> Parameters<S> for AttentionHead<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.conv1.visit(&format!("attn.{}.conv1", self.t), f);
        self.conv2.visit(&format!("attn.{}.conv2", self.t), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        let t = self.t;
        self.conv1.visit_mut(&format!("attn.{t}.conv1"), f);
        self.conv2.visit_mut(&format!("attn.{t}.conv2"), f);
    }
}

/// `1×H×W` confidence map of `head` over `features`.
pub fn score_map<S: Scalar>(features: &FeatureMap<S>, head: &AttentionHead<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let x = g.leaf(&features.activations);
    let (s, _) = head.forward(&mut g, x)?;
    Ok(g.value(s).clone())
}

/// Probability grid over feature cells for one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDistribution<S> {
    pub probs: Vec<S>,
    pub h: usize,
    pub w: usize,
    pub t: usize,
}

impl<S: Scalar> AttentionDistribution<S> {
    pub fn from_probs(probs: Vec<S>, h: usize, w: usize, t: usize) -> Result<Self> {
        if probs.len() != h * w {
            return Err(Error::shape("distribution", format!("{} probabilities for {h}×{w}", probs.len())));
        }
        Ok(AttentionDistribution { probs, h, w, t })
    }

    pub fn prob(&self, row: usize, col: usize) -> S {
        self.probs[row * self.w + col]
    }

    pub fn location(&self, index: usize) -> GlimpseLocation {
        GlimpseLocation {
            t: self.t,
            row: index / self.w,
            col: index % self.w,
        }
    }

    pub fn index(&self, loc: GlimpseLocation) -> usize {
        loc.row * self.w + loc.col
    }

    pub fn log_prob(&self, loc: GlimpseLocation) -> S {
        self.probs[self.index(loc)].ln()
    }
}

/// Spatial softmax of a `1×H×W` confidence map, tagged with timestep `t`.
pub fn attention_distribution<S: Scalar>(confidence: &Tensor<S>, t: usize) -> Result<AttentionDistribution<S>> {
    let (c, h, w) = confidence.chw()?;
    if c != 1 {
        return Err(Error::shape("attention_distribution", format!("expected one channel, got {c}")));
    }
    if !confidence.is_finite() {
        return Err(Error::NonFinite { op: "spatial_softmax" });
    }
    AttentionDistribution::from_probs(softmax_values(confidence.values()), h, w, t)
}

/// `K` independent draws from the multinomial over cells.
pub fn sample_locations<S: Scalar>(dist: &AttentionDistribution<S>, k: usize, rng: &mut Rng) -> Vec<GlimpseLocation> {
    let weights: Vec<f64> = dist.probs.iter().map(|p| p.as_f64()).collect();
    (0..k).map(|_| dist.location(rng.categorical(&weights))).collect()
}

/// Most probable cell; ties resolve to the lowest row-major index.
pub fn argmax_location<S: Scalar>(dist: &AttentionDistribution<S>) -> GlimpseLocation {
    dist.location(crate::tensor::argmax(&dist.probs))
}
