//! Desk-scale compressed-sensing and parallel-imaging MRI reconstruction.
//!
//! The crate covers the whole chain from synthetic data to trained networks:
//!
//! - [`kcore`]: complex grids and centered orthonormal 2D Fourier transforms.
//! - [`sampling`]: variable-density undersampling masks and the noisy
//!   acquisition model.
//! - [`grappa`]: kernel estimation from auto-calibration data and missing-line
//!   interpolation.
//! - [`losses`]: the multi-domain loss suite with analytic gradients.
//! - [`nn`]: a small RemU-Net generator, a convolutional discriminator and the
//!   hand-written reverse-mode engine behind them.
//! - [`pipeline`]: baselines, k-space correction, training and evaluation.
//! - [`metrics`]: PSNR and windowed SSIM.
//! - [`phantom`]: seeded synthetic phantoms.
//! - [`io`]: CGRID, PGM and checkpoint file formats.

pub mod error;
pub mod grappa;
pub mod io;
pub mod kcore;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
pub use kcore::{fft2c, ifft2c, ComplexGrid, Domain, RealGrid};
