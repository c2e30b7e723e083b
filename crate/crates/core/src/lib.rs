//! Unsupervised adversarial domain adaptation of a fully-convolutional
//! monocular depth regressor.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`). Training uses
//! `f32`; the aliases below name the concrete types used by the pipeline.

pub mod adversary;
pub mod congruency;
pub mod depthnet;
pub mod error;
pub mod evalkit;
#[doc(hidden)]
pub mod gradcheck;
pub mod nn;
pub mod scalar;
pub mod scenegen;
pub mod tensor;
pub mod trainkit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f32>;
pub type Image = tensor::Image<f32>;
pub type DepthMap = tensor::DepthMap<f32>;
pub type ParamStore = nn::ParamStore<f32>;
