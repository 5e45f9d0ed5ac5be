//! Unpaired photo/painting translation with a CycleGAN whose critics are
//! trained on the quadratic potential divergence.
//!
//! Module map:
//! - [`divergence`]: the divergence, its L1 distance and the per-direction adversarial scalars.
//! - [`losses`]: cycle, identity and joint generator / critic objectives.
//! - [`models`]: resize-convolution generators and fully convolutional critics.
//! - [`data`]: unpaired image folders, preprocessing and batch sampling.
//! - [`trainer`]: alternating optimization, logging and checkpoints.
//! - [`diagnostics`]: gradient checks, analytic checks and the checkerboard probe.
//! - [`cli`]: the `qpgan` command line.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod divergence;
pub mod error;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
