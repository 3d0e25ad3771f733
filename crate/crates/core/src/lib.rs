//! Coded-aperture snapshot spectral imaging simulator with federated
//! hardware-prompt learning and classic federated baselines.

pub mod config;
pub mod dataio;
pub mod error;
pub mod federation;
pub mod learncore;
pub mod metrics;
pub mod optics;
pub mod rng;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Scalar, Tensor};
