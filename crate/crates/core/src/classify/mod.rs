//! One-vs-rest linear SVMs, score fusion and AP/mAP evaluation.

mod metrics;
mod report;
mod svm;

pub use metrics::{average_precision, chance_map, confusion_matrix, fuse_scores, rank_order, ApVariant};
pub use report::{evaluate, EvalReport, RankedEntry};
pub use svm::{primal_objective, score, score_all, train_ovr, LinearModel, SvmConfig};
