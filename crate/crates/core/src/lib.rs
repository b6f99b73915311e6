//! Spectrum-guided multi-scale state-space sequence models.
//!
//! The crate is organized around a small pipeline:
//!
//! 1. [`signalgen`] synthesizes multiscale time series and decay kernels
//!    with known ground truth.
//! 2. [`spectral`] estimates power spectra, fits piecewise power laws
//!    (an offline grid fit and a trainable hypernet), and computes
//!    energy-weighted representative frequencies per band.
//! 3. [`scalemap`] turns fitted spectra into ordered, acquisition-unit
//!    anchored discretization steps for the state-space backbone.
//! 4. [`msssm`] is the multi-scale state-space backbone itself.
//! 5. [`engine`] is the reverse-mode autodiff tape and optimizer the
//!    backbone trains on.
//! 6. [`train`] assembles the composite loss, masked pretraining, and
//!    the training loop.
//! 7. [`analysis`] numerically checks the kernel-mismatch bound and
//!    exponential-mixture approximation rates, and computes
//!    representation-similarity metrics (CKA, dCor, latent drift).

pub mod analysis;
pub mod engine;
pub mod error;
pub mod kernel;
pub mod msssm;
pub mod scalemap;
pub mod signalgen;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
pub use kernel::KernelProfile;
