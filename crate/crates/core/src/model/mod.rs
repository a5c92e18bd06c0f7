//! The concept-expert architecture: config, parameters, forward pass,
//! traces, checkpoints, and cost estimates.

pub mod checkpoint;
mod config;
mod flops;
mod forward;
mod params;
mod trace;

pub use config::{ModelConfig, TaskKind};
pub use flops::{count_flops, FlopsEstimate};
pub use forward::{
    bind, forward_example, head_predict, route, run_inference, run_single, task_predict,
    BudgetPlan, ExampleForward, ModelIds,
};
pub use params::{
    AttentionBlock, ConceptHead, ConceptProjector, ExpertMlp, LayerNorm, Model, MoceLayer, Router,
    TaskHead,
};
pub use trace::{argmax, ExampleTrace, ForwardTrace, GateRecord};
