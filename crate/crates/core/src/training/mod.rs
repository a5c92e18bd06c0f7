//! Loss assembly, optimization, scheduling, metrics, and the training loop.

mod loss;
mod metrics;
mod optimizer;
mod schedule;
mod trainer;

pub use loss::{balance_loss, class_labels, cv_squared, joint_loss, real_labels, LossBreakdown};
pub use metrics::{macro_f1, metrics_from_traces, rmse_metric, Metrics, TaskMetric};
pub use optimizer::{Optimizer, OptimizerKind};
pub use schedule::pseudo_intervention_budget;
pub use trainer::{
    evaluate, infer_examples, train, EpochRecord, HeadInputSource, Strategy, TrainConfig,
    TrainReport,
};
