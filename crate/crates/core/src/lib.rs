//! Graph-and-attention network for lifting 2D human poses to 3D.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape over dense
//! `f64` tensors ([`tape`]), the network layers built on it ([`layers`],
//! [`model`]), metrics, pose data handling, a training loop and a CLI.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod skeleton;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use skeleton::SkeletonGraph;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
