//! Few-shot classification with support-adaptive attention.
//!
//! A small reverse-mode autodiff engine ([`autodiff`]) drives a four-block
//! convolutional extractor, a meta-weight generator that rescales query
//! channels from a support feature, a spatial attention generator and a
//! relation classifier ([`model`]). [`episodic`] samples K-way n-shot tasks,
//! trains with the joint loss and evaluates with confidence intervals.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the storage type used by training (`f32`) and by gradient
//! checking (`f64`).

pub mod autodiff;
pub mod data;
pub mod episodic;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
