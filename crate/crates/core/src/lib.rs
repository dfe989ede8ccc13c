//! Example-based appearance transfer for tileable SVBRDF material maps.
//!
//! The building blocks are a tape-based reverse-mode autodiff ([`grad`]), a
//! differentiable GGX renderer ([`render`]), a fixed convolutional feature
//! extractor ([`featnet`]), statistical feature losses ([`statloss`]), a
//! tileable generator prior ([`prior`]) and the optimization loops that tie
//! them together ([`engine`]). Everything is generic over `f32`/`f64`; the
//! aliases below fix the precision used by the command-line tool.

pub mod container;
pub mod engine;
pub mod error;
pub mod featnet;
pub mod grad;
pub mod labels;
pub mod optim;
pub mod prior;
pub mod render;
pub mod rng;
pub mod scalar;
pub mod statloss;
pub mod tensor;

pub use error::{Error, Result};
pub use grad::{Padding, Tape, Upsample, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Maps32 = render::MaterialMaps<f32>;
pub type Maps64 = render::MaterialMaps<f64>;
pub type Extractor32 = featnet::FeatureExtractor<f32>;
pub type Generator32 = prior::GeneratorWeights<f32>;
pub type Latent32 = prior::LatentTheta<f32>;
