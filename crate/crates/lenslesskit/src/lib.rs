//! Physics-informed cyclic adversarial toolkit for multi-PSF lensless imaging.
//!
//! A lensless camera replaces the lens with a thin mask; the sensor sees the
//! scene convolved with the mask's caustic point spread function (PSF). This
//! crate provides the full reconstruction stack for that setting:
//!
//! - a fast FFT forward model `y = k * x + noise` usable both for dataset
//!   synthesis and, differentiably, inside the training loop ([`physics`]);
//! - PSF-shuffle augmentation that permutes equal sections of a seed PSF to
//!   produce large families of related PSFs, plus the sparse-coordinate and
//!   tile-stack PSF representations fed to the networks ([`psf`]);
//! - PSF-aware generators (single-stage Y network, two-stage TU network)
//!   and the dual critics (global backbone critic for the lensed domain,
//!   patch critic for the lensless domain) ([`generators`], [`critics`]);
//! - Wasserstein losses with drift and gradient penalties and the dual-domain
//!   supervised terms ([`losses`]);
//! - the cyclic adversarial training loop with critic warmup, in-loop PSF
//!   generation, forward synthesis, checkpointing, and logging ([`training`]);
//! - corpus ingestion and paired-sample synthesis ([`data`]);
//! - PSNR/SSIM evaluation and runtime benchmarking ([`metrics`]).
//!
//! Gradients come from the in-crate [`autodiff`] module; its backward pass
//! emits graph ops, so the critic gradient penalty (which differentiates an
//! input gradient w.r.t. parameters) is exact rather than approximated.
//!
//! The `lenslesskit` binary exposes the operator surface; the `examples/`
//! directory holds one runnable walkthrough per capability.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod critics;
pub mod data;
pub mod error;
pub mod fft;
pub mod generators;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod physics;
pub mod psf;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
