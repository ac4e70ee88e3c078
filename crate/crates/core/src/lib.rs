//! Actor-transformer group activity recognition: a small reverse-mode
//! autodiff engine, the transformer encoder, 2-D positional encodings, the
//! fused multi-branch model, training, synthetic scene data and the harness
//! behind the `gar` binary.
//!
//! The numeric core is generic over [`Real`] (`f64` or `f32`); the aliases
//! below name the common concrete types.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod params;
pub mod posenc;
pub mod rng;
pub mod scalar;
pub mod scenes;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use autodiff::{Graph, Mode, Var};
pub use error::{GarError, Result};
pub use model::{GarModel, ModelConfig};
pub use scalar::Real;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = GarModel<f64>;
pub type Model32 = GarModel<f32>;
pub type Graph64<'w> = Graph<'w, f64>;
pub type Graph32<'w> = Graph<'w, f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
