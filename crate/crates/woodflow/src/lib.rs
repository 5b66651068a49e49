//! Invertible low-rank flow transformations with exact likelihoods.
//!
//! This crate implements a multi-scale normalizing flow whose permutation
//! layers are low-rank perturbations of the identity (`I + UV`), applied along
//! the channel axis, the flattened spatial axis, or — in the memory-efficient
//! variant — the width and height axes separately. The structure gives exact,
//! cheap log-determinants (via the determinant lemma) and exact, cheap
//! inverses (via the matrix inversion lemma), so the same model trains by
//! maximum likelihood and samples by direct inversion, in linear time in the
//! number of pixels.
//!
//! The crate is self-contained: dense kernels, a reverse-mode tape, the flow
//! layers, training, a binary tensor format, brute-force verification
//! oracles, and a benchmark harness, plus the `woodflow` CLI on top.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
mod linalg;
pub mod model;
pub mod oracle;
mod rng;
pub mod tensor;
pub mod train;

/// Element type for all tensor math: `f64` by default, `f32` when the crate
/// is built with the `real32` feature (benchmark experiments only — tests and
/// oracles assume the 64-bit build).
#[cfg(not(feature = "real32"))]
pub type Real = f64;
#[cfg(feature = "real32")]
pub type Real = f32;

pub use error::{Error, Result};
pub use tensor::{SLogDet, Tensor};
