//! Concept bottleneck models whose concept predictions can be traced back to
//! image regions, plus a benchmark that scores how trustworthy those regions
//! are.
//!
//! The crate provides:
//!
//! - [`data`]: a procedural part-annotated dataset generator, a CUB-format
//!   annotation loader, and patch-drop masking.
//! - [`backbone`]: a small differentiable convolutional feature extractor
//!   with shallow and deep taps.
//! - [`models`]: the vanilla CBM head (average pool, concept predictor,
//!   category predictor) and a part-prototype CBM head with per-concept
//!   localization maps.
//! - [`losses`]: concept/task losses plus three alignment objectives
//!   (cross-layer, cross-image, prediction) with verified gradients.
//! - [`attribution`]: Grad-CAM and Grad-CAM++ concept localization for the
//!   vanilla baseline.
//! - [`metric`]: the concept trustworthiness score.
//! - [`harness`]: training loop, benchmark runner, patch-drop experiment,
//!   configuration and checkpoints.
//!
//! The `examples/` directory contains one runnable example per capability;
//! the `cbmtrust` binary exposes the same functionality as subcommands.

pub mod attribution;
pub mod backbone;
pub mod data;
pub mod grad;
pub mod harness;
pub mod losses;
pub mod metric;
pub mod models;
pub mod tensor;

mod error;

pub use error::{Error, Result};
