//! Adaptive weighted attention network (AWAN) for reconstructing 31-band
//! hyperspectral cubes from RGB images, built on a small reverse-mode
//! autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and the differentiation tape.
//! - [`nn`]: convolution, PReLU, sigmoid, softmax.
//! - [`attention`]: adaptive weighted channel attention and patch-level
//!   second-order non-local attention.
//! - [`model`]: dual residual attention blocks and the full network.
//! - [`loss`]: MRAE, RMSE, the camera-sensitivity projection loss and heatmaps.
//! - [`data`]: cube/CSS file formats, projection, synthetic data and patches.
//! - [`optim`], [`train`], [`checkpoint`], [`config`], [`gradcheck`]: training
//!   and tooling.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
mod scalar;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testing;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
