//! Desk-scale training scaffold for a chunk-wise autoregressive multi-view
//! world model: chunk-structured prompt layout, semi-causal block-sparse
//! attention, temporal importance sampling, horizon/stride curricula, the
//! loss suite, a synthetic driving world, a tiny teacher-forced transformer
//! with closed-loop rollout, and the evaluation/ablation harness.
//!
//! Numeric kernels are generic over [`scalar::Real`] (f32/f64); the default
//! working precision is [`Scalar`].

pub mod acceptance;
pub mod attention;
pub mod curriculum;
pub mod error;
pub mod experiment;
pub mod layout;
pub mod mask;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod sampler;
pub mod scalar;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default working precision of the training and evaluation paths.
pub type Scalar = f64;

/// Matrix in the default precision.
pub type Matrix = mat::Mat<Scalar>;

/// Loss weights in the default precision.
pub type LossWeights = objectives::LossWeights<Scalar>;

/// Importance-sampling configuration in the default precision.
pub type ImportanceConfig = sampler::ImportanceConfig<Scalar>;
