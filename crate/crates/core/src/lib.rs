//! Latent-matching OOD attacks on neural encoders, the OOD detectors they
//! defeat, and an evaluation harness measuring both.

pub mod attack;
pub mod autodiff;
pub mod combinatorics;
pub mod data;
pub mod detectors;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
