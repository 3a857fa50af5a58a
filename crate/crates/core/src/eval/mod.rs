//! Ensemble fusion, test-set metrics, fold and cross-validation reports and
//! feature export.

mod export;
mod metrics;
mod report;

pub use export::{export_features, feature_matrix_csv};
pub use metrics::{
    calibration_report, confidence_histogram, confusion_metrics, decide, ensemble_probs, roc_auc, CalibrationBin,
    Confusion, ConfidenceHistogram, ConfusionMetrics,
};
pub use report::{
    calibration_csv, confidence_csv, summarize, CvReport, FoldReport, MetricSummary, ModelSummary, TrialPrediction,
    METRIC_NAMES,
};
