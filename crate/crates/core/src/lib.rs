//! Sparse optical Doppler tomography reconstruction toolkit.
//!
//! The crate covers the full desk-scale pipeline: complex-signal processing
//! and the classical phase-subtraction reconstruction, a synthetic phantom
//! generator with analytic ground truth, sparse A-line sampling, a small
//! reverse-mode autodiff engine, the ASBA reconstruction network (A-line ROI
//! selective scan, B-line phase attention, flow-aware weighted loss),
//! training/evaluation, and the file formats the CLI speaks.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! concrete aliases for both precisions live at the crate root. Training
//! runs at `f32`, gradient checks instantiate the same code at `f64`.

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod fft;
pub mod params;
pub mod phantom;
pub mod sampling;
pub mod scalar;
pub mod scan_kernel;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training precision.
pub type Real = f32;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type RawBScan32 = signal::RawBScan<f32>;
pub type RawBScan64 = signal::RawBScan<f64>;
pub type FlowImage32 = signal::FlowImage<f32>;
pub type FlowImage64 = signal::FlowImage<f64>;
