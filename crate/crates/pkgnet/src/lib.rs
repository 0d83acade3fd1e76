//! PKG-Net: video anomaly detection via a student auto-encoder trained on
//! future-frame prediction plus block-wise imitation of a frozen pretrained
//! teacher, with calibrated anomaly scoring and frame-level AUROC evaluation.
//!
//! Module map:
//! * [`data`] — frames, object boxes, labels, spatio-temporal clips, and the
//!   synthetic desk-scale dataset.
//! * [`model`] — the frozen teacher with block taps and the trainable
//!   student; checkpointing.
//! * [`nn`] — the minimal CPU tensor/layer/optimizer stack underneath.
//! * [`loss`] — the three training objectives and their gradients.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scoring;

pub use error::{Error, Result};
