//! Optimizers, metrics, synthetic data and the train/eval loops.

pub mod ablation;
pub mod metrics;
pub mod optim;
pub mod synthetic;
pub mod trainer;

pub use metrics::{classification_report, compute_miou, shape_iou, MetricReport};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, Schedule};
pub use synthetic::{generate_synthetic, parts_of_category, Dataset, Sample, Shape, SyntheticDatasetSpec, Task};
pub use trainer::{evaluate, make_batches, predict, train_loop, Control, EpochContext, EpochRecord, Model, ModelSpec, Prediction, TrainConfig};
