//! Diagnostic metrics for slide- and patch-level predictions.
//!
//! Per-class one-vs-rest accuracy, specificity and sensitivity; foreground-masked patch
//! accuracy; macro and micro averages; ROC/AUC; and the rank-sum and normality tests
//! used to compare observer groups.

mod classification;
mod error;
mod records;
mod report;
mod roc;
pub mod stats;

pub use classification::{
    class_metrics, confusion_counts, macro_average, macro_average_defined, micro_accuracy,
    micro_average, patch_accuracy, ClassMetrics, ConfusionCounts, MacroAverage, PatchAccuracy,
    PatchNormalization, DEFAULT_PATCH_FOREGROUND,
};
pub use error::{MetricError, Result};
pub use records::{PatchPredictionRecord, SlidePredictionRecord, CLASS_NAMES, NUM_CLASSES};
pub use report::{build_report, AverageRow, ClassReport, MetricReport};
pub use roc::{auc, roc_curve, write_roc_csv, RocPoint};
pub use stats::{ks_normality, wilcoxon_rank_sum, KsResult, WilcoxonMode, WilcoxonResult};
