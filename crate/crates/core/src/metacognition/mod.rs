//! Inference-time self-monitoring and correction: confidence statistics over
//! routing and concept logits, automatic two-cluster thresholds, flagging,
//! and tuning-free expert reallocation.

mod cluster;
mod entropy;
mod intervention;
mod scrutiny;

pub use cluster::{fit_two_means, ThresholdFit};
pub use entropy::{entropy_records, shannon_entropy, EntropyRecord, ScrutinyStatistic};
pub use intervention::{
    evaluate_with_intervention, intervene, oracle_flags, InterventionMode, InterventionOutcome,
    InterventionPolicy, InterventionScope,
};
pub use scrutiny::{
    entropy_values_csv, fit_thresholds, flag, ConceptThresholds, FlagRecord, ScrutinyReport,
    Thresholds,
};
