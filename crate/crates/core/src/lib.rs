//! Dynamic-degradation image synthesis, a dynamic-convolution
//! restore-and-fuse network, and the evaluation metrics that score it.
//!
//! The crate is organized bottom-up: [`autodiff`] provides a tape-based
//! reverse-mode engine over f64 arrays, [`kernels`] builds the degradation
//! operator, [`dynconv`] and [`network`] assemble the model, [`losses`] and
//! [`metrics`] score it, and [`pipeline`] drives dataset synthesis,
//! training, inference, and ablations end to end.

pub mod autodiff;
pub mod dynconv;
pub mod hash;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod raster;
pub mod synthetic;

mod error;

pub use error::{Error, Result};
