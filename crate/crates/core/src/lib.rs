//! EEG-to-speech-envelope reconstruction with a subject-identity penalty.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what training and evaluation use.

pub mod checks;
pub mod classifier;
pub mod codec;
pub mod error;
pub mod eval;
pub mod mi;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type ParamSet = params::ParamSet<f64>;
pub type Codec = codec::MlaCodec<f64>;
pub type Classifier = classifier::CtaMtdnn<f64>;
pub type Estimator = mi::MiEstimator<f64>;
