//! Attention-based multiple-instance multi-label learning over bags of frames.
//!
//! A video is treated as a bag of frame-level instances that carries only
//! bag-level labels. Frames are projected, pooled by mean, max, (gated)
//! attention or several attention heads, passed through a context gate and
//! classified per class. The classifier can then be fine-tuned on short
//! labeled segments so that it localizes labels in time.
//!
//! Modules:
//! - [`datamodel`]: bags, segments, vocabularies, frame sampling, the
//!   planted-segment synthetic corpus and line-delimited JSON I/O.
//! - [`pooling`]: MIL pooling operators and their analytic gradients.
//! - [`classifier`]: context gating, logistic and mixture-of-experts heads,
//!   max-combination across heads and the weighted cross-entropy loss.
//! - [`training`]: model composition, Adam, the two-phase training loop and
//!   a finite-difference gradient checker.
//! - [`evaluation`]: MAP@K, prediction sets, ensembling and submission files.

pub mod classifier;
pub mod datamodel;
mod error;
pub mod evaluation;
pub mod fsutil;
pub mod pooling;
mod math;
mod serde_arrays;
pub mod training;

pub use error::{Error, Result};
