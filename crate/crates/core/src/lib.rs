//! Sparse-coding frontend defense for image classifiers.
//!
//! The frontend projects overlapping image patches onto an overcomplete
//! dictionary, keeps the `T` largest coefficients per patch, quantizes the
//! survivors to `{0, ±‖d_l‖₁}` and decodes the result back to image size for
//! an ordinary CNN classifier. The crate also carries the adaptive attack
//! suite used to evaluate it and the experiment harness around both.

pub mod attacks;
pub mod autodiff;
pub mod dictlearn;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod model;
pub mod nn;
pub mod patches;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
