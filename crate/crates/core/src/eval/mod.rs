//! Evaluation: open-set metrics, threshold sweeps, 2-D embeddings, reports.

pub mod metrics;
pub mod report;
mod svg;
pub mod tsne;

pub use metrics::{compute_metrics, confusion_matrix, threshold_sweep, ConfusionMatrix, OsrMetrics};
pub use report::{render_reports, LatentScatter};
pub use tsne::{embed_2d, TsneConfig};
