//! Desk-scale low-light domain adaptation for human pose estimation.
//!
//! The crate synthesizes low-light training images from annotated well-lit
//! ones by extracting high-frequency characteristics of real low-light
//! references in the Fourier domain (DHF), injecting them through trained
//! per-scale adapters into a frozen convolutional decoder (LCIM), and
//! aligning global channel statistics. A miniature transformer pose decoder
//! with a per-token softmax gate over pose-prior and image-cue latents (DCA)
//! is trained on the synthesized data and scored with a COCO-style OKS
//! average-precision harness.
//!
//! Everything is CPU-only, double precision, and deterministic under a
//! single seed split into named substreams. See the `cli` module (and the
//! `udapose` binary) for the operator surface.

pub mod annotations;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod containers;
pub mod error;
pub mod eval;
pub mod freq;
pub mod image_data;
pub mod lcim;
pub mod nn;
pub mod params;
pub mod pose;
pub mod report;
pub mod rng;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, Result};
pub use image_data::Image;
