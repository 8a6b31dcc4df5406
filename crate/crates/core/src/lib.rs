//! Weakly supervised localization from image-level labels.
//!
//! A small dense-block CNN attaches a global-average-pooling classification
//! head to every block and fuses the per-block logits through learned
//! per-class relevance weights constrained to the probability simplex. At
//! inference the same weights fuse the per-block class activation maps into a
//! multiscale attention map, which is thresholded into bounding boxes and
//! scored against ground truth with IOU-based accuracy and average false
//! positives.
//!
//! The crate is organized around:
//! - [`tensor`]: an f64 tensor type plus a tape-based reverse-mode autodiff
//!   engine supplying every primitive the model needs;
//! - [`model`]: the dense-block backbone, per-block heads, logit fusion and
//!   the class-balanced loss;
//! - [`trainer`]: Adam, plateau learning-rate decay, checkpointing and the
//!   training loop;
//! - [`attention`]: per-block CAMs and their multiscale fusion;
//! - [`localization`]: map thresholding, connected components, boxes and the
//!   accuracy/AFP evaluation harness;
//! - [`synthdata`]: a deterministic synthetic multi-label dataset generator.

pub mod attention;
pub mod localization;
pub mod model;
pub mod pgm;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

mod error;

pub use error::{Error, Result};
