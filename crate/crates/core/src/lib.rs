//! Ventricle segmentation from noisy pseudo-labels.
//!
//! The crate covers the whole desk-scale experiment:
//!
//! - [`phantom`] generates two-channel synthetic brain volumes with exact
//!   left/right ventricle labels.
//! - [`preprocess`] masks and percentile-normalizes each channel.
//! - [`watershed`] produces imperfect pseudo-labels with a seeded priority flood.
//! - [`nn`] is a small tensor engine and 2D U-net trained on those labels.
//! - [`metrics`] computes Dice, ROC/AUC and paired bootstrap p-values.
//! - [`pipeline`] wires the stages into a reproducible, config-driven run.
//!
//! Volumes are persisted as single-file NIfTI-1 through [`nifti`].

pub mod error;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod volume;
pub mod watershed;

pub use error::{Error, Result};
pub use volume::{DType, LabelMap, Volume};
