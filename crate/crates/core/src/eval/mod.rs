//! Metrics, significance tests, bucketed error analysis and run comparison.

mod buckets;
mod metrics;
mod perplexity;
mod predictions;
mod report;
mod significance;

pub use buckets::{bucketed_metric, mean_error_disparity, BucketScheme, BucketScore};
pub use metrics::{
    accuracy, class_indices, disattenuate, disattenuated_r, f1_score, mse, pearson_r, pooled_perplexity,
    stance_aggregate, Average, MetricKind,
};
pub use perplexity::{author_nll, lm_prediction_set, perplexity};
pub use predictions::{PredictionRow, PredictionSet, Unit, PREDICTIONS_HEADER};
pub use report::{compare_report, BucketTable, Cell, Report, Row, RunEval, Significance, TaskEval, SIGNIFICANCE_LEVEL};
pub use significance::{mcnemar_from_counts, mcnemar_test, paired_t_test, McNemar, TTest, P_FLOOR};
