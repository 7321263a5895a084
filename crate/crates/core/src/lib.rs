//! Calibration-free correction of B0-inhomogeneity and relaxation
//! distortion in dual-echo single-shot EPI.
//!
//! The two echoes are time-segmented into one undersampled k-t volume whose
//! pixels follow a single decaying exponential. Smoothly varying exponential
//! parameters make the volume annihilable by a small 3-D filter, so a
//! Toeplitz lifting of its fully sampled neighborhoods is low rank. The
//! null space of that lifting gives the per-pixel decay map `β`, after which
//! the distortion-free image is a linear least-squares solve.

pub mod error;
pub mod fft;
pub mod linalg;
pub mod model;
pub mod phantom;
pub mod toeplitz;
pub mod nullspace;
pub mod recon;
pub mod baselines;
pub mod io;
pub mod cli;

pub use error::{Error, Result};
