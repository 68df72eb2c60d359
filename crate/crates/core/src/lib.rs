//! Geography-aware momentum-contrast pretraining.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`data`]: geo-tagged image sequences, JSON-lines manifests, a synthetic
//!   generator, augmentation and temporal positive-pair sampling;
//! - [`geocluster`]: k-means over area coordinates producing geo-labels;
//! - [`model`]: a small MLP encoder with hand-written backprop, the geo head
//!   and the momentum (EMA) update of the key encoder;
//! - [`queue`]: the FIFO dictionary of negative keys;
//! - [`loss`]: InfoNCE, geo cross-entropy, their weighted sum and gradients;
//! - [`trainer`]: the pretraining variants, SGD, schedules and checkpoints;
//! - [`eval`]: frozen linear probe, finetuning, temporal aggregation and metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod archive;
pub mod data;
pub mod error;
pub mod eval;
pub mod geocluster;
pub mod loss;
pub mod model;
pub mod queue;
pub mod trainer;

pub use error::{Error, Result};
