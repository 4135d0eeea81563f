//! Metric suite and downstream inspection models.

pub mod downstream;
pub mod features;
pub mod focal;
pub mod metrics;
pub mod quality;
pub mod report;

pub use downstream::{Classifier, DownstreamConfig, Segmenter};
pub use features::{ExtractorConfig, FeatureExtractor, Provenance, PATCH_SIZE};
pub use focal::{focal_loss, FocalParams};
pub use metrics::{
    auroc, average_precision, connected_components, f1_max, image_metrics, integrate_to, pixel_metrics, pro,
    ImageMetrics, PixelMetrics, ScoreMap, PRO_FPR_LIMIT,
};
pub use quality::{ic_diversity, ic_diversity_with, kid, KID_SCALE};
pub use report::{evaluate, evaluate_with, CategoryMetrics, EvalConfig, EvalPart, MetricReport, MetricTable, METRIC_COLUMNS};
