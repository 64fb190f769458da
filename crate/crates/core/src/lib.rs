//! Jacobian regularization against universal adversarial perturbations.
//!
//! The crate trains small convolutional classifiers with an input-output
//! Jacobian penalty, crafts universal adversarial perturbations against them,
//! and measures how strongly the Jacobians of different inputs align.
//!
//! All numerics are generic over [`Scalar`] (`f32` for training throughput,
//! `f64` for verification); the aliases below name the two instantiations.

pub mod attacks;
pub mod data;
pub mod error;
pub mod jacobian;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
