//! Continuous-time dynamic graph learning with k-hop temporal message
//! propagation and a layer-attentive node encoder.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod ctdg;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod optim;
pub mod params;
pub mod propagator;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete aliases for the two supported precisions.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
