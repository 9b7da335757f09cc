//! Differentiable feature Gaussian splatting with a shared hash-grid feature
//! field, a convolutional image decoder, and coarse-to-fine super-resolution
//! training with gradient-guided selective splitting.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod field;
pub mod fixture;
pub mod gss;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scene;
pub mod splat;
pub mod train;

pub use error::{Error, Result};
