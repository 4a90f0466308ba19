//! Supervised fine-tuning, prediction, metrics, cross-validation and reports.

mod metrics;
mod model;
mod report;
mod train;

pub use metrics::{evaluate, evaluate_scans, metrics_from_predictions, Confusion, Metrics, Truth};
pub use model::{argmax, predict, predict_batch, softmax, ClassifierModel, Prediction};
pub use report::{emit_report, score_histogram_csv, Report, CONFUSION_FILE, CURVE_FILE, HISTOGRAM_FILE, METRICS_FILE};
pub use train::{
    cross_entropy, cross_validate, finetune, finetune_loaded, finetune_scans, format_mean_std, mean_std, source_from,
    CrossValResult, EncoderSource, FinetuneConfig, FinetuneEpoch, FinetuneOutcome, Labeled,
};
