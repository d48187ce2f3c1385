//! Keyed Krawtchouk-moment detection of adversarial images.
//!
//! The pipeline decomposes an image with weighted Krawtchouk polynomials
//! under a secret set of spatial parameters, integrates the coefficients
//! into radial frequency bands, and feeds the result to a linear SVM.

pub mod attacks;
pub mod error;
pub mod features;
pub mod harness;
pub mod image;
pub mod keyed;
pub mod krawtchouk;
pub mod model;
pub mod selftest;
pub mod svm;
pub mod synth;

pub use error::{Error, Result};
