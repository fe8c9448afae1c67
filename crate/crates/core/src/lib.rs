//! Hyperspectral object detection by spectral-spatial feature aggregation.

pub mod boxes;
pub mod cube_io;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod hid;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod ssa;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type PcaModel64 = hid::PcaModel<f64>;
