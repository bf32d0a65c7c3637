//! Out-of-distribution radar detection in non-Gaussian clutter.
//!
//! The crate bundles every stage of a CVAE / ANMF detection chain:
//!
//! - [`linalg`]: dense complex primitives (Hermitian factorizations, Toeplitz
//!   correlation, unitary DFT, quadratic forms).
//! - [`sim`]: seeded compound-Gaussian clutter, thermal noise and target injection.
//! - [`covest`]: sample covariance, Tyler's fixed-point shape estimator and ridge
//!   regularization.
//! - [`detectors`]: MF / NMF statistics and their adaptive plug-in versions.
//! - [`whiten`]: slow-time segmentation, neighborhood whitening, Doppler profiles
//!   and the cube file format.
//! - [`cvae`]: the complex-valued VAE with a non-circular latent posterior.
//! - [`calib`]: per-bin ECDF calibration, p-value fusion and empirical CFAR thresholds.

pub mod calib;
pub mod covest;
pub mod cvae;
pub mod detectors;
pub mod error;
pub mod linalg;
pub mod rng;
pub mod sim;
pub mod whiten;

pub use error::{Error, Result};
pub use linalg::{CMatrix, HermitianMatrix, C64};
