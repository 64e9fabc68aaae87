//! Self-training for unsupervised domain adaptation in semantic segmentation:
//! instance-adaptive pseudo-label selection, hard-class copy-paste
//! augmentation, region-wise regularization and an EMA teacher, together with
//! a synthetic benchmark to exercise everything end to end.

pub mod cli;
pub mod data;
pub mod error;
pub mod hpla;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pseudolabel;
pub mod report;
pub mod rng;
pub mod sweep;

pub use error::{Error, Result};
