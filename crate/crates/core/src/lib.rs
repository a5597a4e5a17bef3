//! Desk-scale toolkit for aberration calibration from synthetic Ronchigrams.
//!
//! The crate simulates aberrated Ronchigram observations, compresses their
//! Fourier power spectra to a low-dimensional latent space with a small
//! trainable encoder, and jointly estimates the unknown initial aberration
//! state and the aberration-to-latent mapping with an EM scheme over
//! symmetry-constrained Gaussian-process models. A numerical identifiability
//! suite certifies the structural conditions that make the joint estimate
//! unique, and a synthetic testbed provides oracle-grade scenarios with
//! controlled model mismatch.

pub mod dataset;
pub mod em;
pub mod encoder;
pub mod error;
mod fft;
pub mod gp;
pub mod grid;
pub mod ident;
pub mod nn;
pub mod optics;
pub mod preprocess;
pub mod testbed;

pub use error::{Error, Result};
