//! Pansharpening and hyperspectral fusion built on selective state space
//! models, with a small reverse-mode autodiff engine, synthetic data,
//! quality metrics and a deterministic trainer.

pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
