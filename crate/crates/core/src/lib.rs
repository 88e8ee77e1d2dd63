//! Knowledge distillation from a PointNet-style teacher into a compact
//! student, trained jointly for open-set recognition.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`data`]: OFF mesh ingestion, surface sampling, closed/open splits and
//!   the binary split cache.
//! * [`pseudo_open`]: synthesis of pseudo-open training samples by mixing
//!   points of clouds from distinct known classes.
//! * [`models`]: teacher and student networks on top of `candle`.
//! * [`losses`]: cross-entropy, temperature-scaled distillation, contrastive
//!   representation distillation and the weighted joint objective.
//! * [`osr`]: thresholded and native (k+1)-way open-set prediction.
//! * [`trainer`]: training regimes and grid search.
//! * [`eval`]: metrics, threshold sweeps, 2-D embeddings and reports.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
mod kernels;
pub mod optim;
pub mod models;
pub mod osr;
pub mod pseudo_open;
pub mod trainer;

pub use error::{Error, Result};
