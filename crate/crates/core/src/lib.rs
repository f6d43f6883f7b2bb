//! Probability density distillation at desk scale.
//!
//! An autoregressive dilated-convolution teacher with a mixture-of-logistics
//! head is trained by maximum likelihood, then distilled into a stack of
//! inverse autoregressive flows that generate a whole waveform in one
//! parallel pass. Everything runs on a small `f64` reverse-mode tape
//! ([`autodiff`]).

pub mod autodiff;
pub mod distill;
pub mod distributions;
mod error;
pub mod harness;
pub mod params;
pub mod rng;
pub mod student;
pub mod teacher;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
