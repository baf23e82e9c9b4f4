//! Fully convolutional attention networks for fine-grained classification.
//!
//! A shared convolutional backbone produces a feature map; one small
//! convolutional head per timestep turns it into a spatial-softmax policy over
//! glimpse locations; part crops chosen by the policy are classified at full
//! resolution and their scores averaged with the whole-image prediction. The
//! heads are trained with REINFORCE under a greedy per-step reward.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision types used for training.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod checks;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod layer;
pub mod model;
pub mod optim;
pub mod rl;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type FeatureMap64 = features::FeatureMap<f64>;
pub type Model64 = model::ModelParams<f64>;
pub type Model32 = model::ModelParams<f32>;
