//! Unrolled iterative feature refinement for compressed-sensing MRI.
//!
//! The crate provides the numerical building blocks (unitary FFT, convolution
//! with exact adjoint, DCT filter bases), k-space sampling simulation, the
//! feature descriptor used for refinement, the unrolled network with a
//! hand-written backward pass and SGD trainer, the classical iterative
//! baseline, and image-quality metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod descriptor;
pub mod error;
pub mod io;
pub mod metrics;
pub mod network;
mod reference;
pub mod numerics;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{ComplexImage, FilterBank, Kernel, RealImage, C64};
