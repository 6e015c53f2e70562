//! Desk-scale multi-encoder token fusion connector.
//!
//! The crate covers the numerical pipeline that fuses token grids from two
//! heterogeneous vision encoders into one compact token set: spatial-entropy
//! profiling and layer selection, orthogonality-constrained per-layer
//! projections with softmax layer mixing, 2-D rotary-embedded gated
//! cross-attention, a bounding-box coordinate-token codec, attention rollout
//! heatmaps, directional-derivative gradient checks, and a seeded synthetic
//! stack generator so everything can be exercised without pretrained models.
//!
//! All math is generic over the scalar type through [`Scalar`]; the aliases
//! at the crate root pin `f64`, which is what the documented tolerances and
//! the CLI assume. Values are immutable after construction, operations are
//! pure, and every reduction runs in a deterministic order, so outputs are
//! bit-identical for identical inputs and seeds.

pub mod boxcodec;
pub mod cmvt;
pub mod entropy;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grid;
pub mod linalg;
pub mod mixing;
pub mod ortho;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use ortho::OrthoMethod;
pub use scalar::{DType, Scalar};

/// `f64` tensor: the pipeline's value currency.
pub type Tensor = tensor::Tensor<f64>;
/// `f64` token grid.
pub type TokenGrid = grid::TokenGrid<f64>;
/// `f64` orthogonal layer.
pub type OrthoLayer = ortho::OrthoLayer<f64>;
/// `f64` layer stack.
pub type LayerStack = entropy::LayerStack<f64>;
/// `f64` entropy profile.
pub type EntropyProfile = entropy::EntropyProfile<f64>;
/// `f64` mixing weights.
pub type MixingWeights = mixing::MixingWeights<f64>;
/// `f64` fusion parameters.
pub type FusionParams = fusion::FusionParams<f64>;
/// `f64` grid positions.
pub type GridPositions = fusion::GridPositions<f64>;
/// `f64` connector projection head.
pub type Projection = fusion::Projection<f64>;
/// `f64` attention layer for rollout.
pub type AttnLayer = rollout::AttnLayer<f64>;
