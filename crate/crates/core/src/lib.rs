//! Metric learning for two-modality recognition: a small reverse-mode tensor
//! engine, an SE-block backbone, triplet / class-mean / Unit-Class losses, a
//! pairwise cross-modality discriminator, two-stage training and biometric
//! evaluation.

pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod checks;
pub mod cmd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
