//! Deblurring of low-resolution gridded scalar fields with a block-diagonal
//! Gaussian process (BDGP) model.
//!
//! The library implements the full downscaling pipeline for a scalar field
//! observed through a Gaussian point spread function:
//!
//! 1. [`partition`] — refine an oversegmented mask set into a non-overlapping
//!    region partition of the grid;
//! 2. [`meanfit`] — remove a per-pixel harmonic (annual/diurnal) mean by
//!    ordinary least squares, leaving residual fields;
//! 3. [`estimate`] — per-region maximum-likelihood estimation of the
//!    squared-exponential variance and length scale, plus a closed-form
//!    variance estimator for the blurred sensor;
//! 4. [`krige`] — blur-aware Gaussian process prediction of the latent
//!    residual field on the fine grid with per-pixel posterior variance;
//! 5. [`synth`] — synthetic blur-and-recover experiments that verify the
//!    pipeline end to end.
//!
//! Covariance mathematics (the block-diagonal squared-exponential kernel and
//! its blur convolutions) lives in [`bdgp`]; raster containers and portable
//! file I/O in [`grid`].

pub mod bdgp;
pub mod estimate;
pub mod grid;
pub mod krige;
pub mod meanfit;
pub mod partition;
pub mod synth;

mod error;

pub use error::{Error, Result};
