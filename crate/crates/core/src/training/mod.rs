//! Training loop, augmentation, schedules and evaluation metrics.

mod augment;
mod config;
mod fit;
mod metrics;

pub use augment::{augment, jitter, rotate_z};
pub use config::TrainConfig;
pub use fit::{
    evaluate, evaluate_prepared, fit, metrics_csv, per_class_csv, predict, EpochRecord, FitOptions, FitResult, Sample,
    METRICS_HEADER,
};
pub use metrics::{argmax_restricted, evaluate_classification, evaluate_segmentation, shape_iou, Metrics, ShapeResult};
