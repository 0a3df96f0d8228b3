//! Monocular RGB 3D hand pose estimation with a depth-map regularizer whose
//! targets are synthesized by an unpaired RGB-to-depth GAN.
//!
//! The crate is split along the training pipeline:
//!
//! - [`dataio`]: dataset layouts, preprocessing, target construction and the
//!   procedural fixture generator.
//! - [`depthgan`]: the RGB-to-depth generator, the realness discriminator and
//!   the adversarial losses.
//! - [`posenet`]: the multi-stage heatmap predictor, relative-depth regression
//!   head, transposed-convolution depth regularizer and the task loss.
//! - [`trainer`]: the two-phase schedule (separate initialization, then joint
//!   min-max fine-tuning) with checkpointing.
//! - [`eval`]: 3D lifting, EPE / PCK / AUC metrics and report files.
//! - [`cli`]: the `handpose` command-line entry point.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod depthgan;
pub mod error;
pub mod eval;
pub mod nn;
pub mod posenet;
pub mod trainer;

pub use error::{Error, Result};
