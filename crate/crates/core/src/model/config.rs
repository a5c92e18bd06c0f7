//! Model hyperparameters and their invariants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the task head predicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// n-way classification with macro-F1 evaluation.
    Classification { classes: usize },
    /// Single real output with RMSE evaluation.
    Regression,
}

impl TaskKind {
    /// Width of the task head output.
    pub fn output_dim(&self) -> usize {
        match self {
            TaskKind::Classification { classes } => *classes,
            TaskKind::Regression => 1,
        }
    }
}

/// Full architectural description of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Embedding width `E`.
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Plain attention blocks before the expert stack.
    pub num_attention_layers: usize,
    /// Expert layers (each also carries an attention block).
    pub num_moce_layers: usize,
    /// Total experts `M`, shared across concepts within a layer.
    pub num_experts: usize,
    /// Per-concept expert budget `T` during normal inference.
    pub experts_active: usize,
    /// Enlarged budget `T'` used by interventions and the training rehearsal.
    pub experts_intervention: usize,
    /// Value-set size for each concept, in concept order.
    pub concept_arities: Vec<usize>,
    pub task_kind: TaskKind,
    pub router_hidden_dim: usize,
    pub expert_hidden_dim: usize,
    /// Rescale surviving gates to sum to one after the top-T cut.
    /// Off by default: gates keep their raw softmax mass.
    #[serde(default)]
    pub renormalize_gates: bool,
}

impl ModelConfig {
    pub fn num_concepts(&self) -> usize {
        self.concept_arities.len()
    }

    /// Task head input width: concatenated concept probability vectors.
    pub fn concept_dim(&self) -> usize {
        self.concept_arities.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len must be positive"));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_moce_layers == 0 {
            return Err(Error::config("at least one expert layer is required"));
        }
        if !(1 <= self.experts_active
            && self.experts_active < self.experts_intervention
            && self.experts_intervention <= self.num_experts)
        {
            return Err(Error::config(format!(
                "expert budgets must satisfy 1 <= T ({}) < T' ({}) <= M ({})",
                self.experts_active, self.experts_intervention, self.num_experts
            )));
        }
        if self.concept_arities.is_empty() {
            return Err(Error::config("at least one concept is required"));
        }
        if let Some(bad) = self.concept_arities.iter().find(|&&a| a < 2) {
            return Err(Error::config(format!(
                "concept arities must be at least 2, got {bad}"
            )));
        }
        if let TaskKind::Classification { classes } = self.task_kind {
            if classes < 2 {
                return Err(Error::config("classification needs at least 2 classes"));
            }
        }
        if self.router_hidden_dim == 0 || self.expert_hidden_dim == 0 {
            return Err(Error::config("hidden dims must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            max_seq_len: 8,
            embed_dim: 8,
            num_heads: 2,
            num_attention_layers: 1,
            num_moce_layers: 1,
            num_experts: 4,
            experts_active: 1,
            experts_intervention: 2,
            concept_arities: vec![3, 3],
            task_kind: TaskKind::Classification { classes: 3 },
            router_hidden_dim: 6,
            expert_hidden_dim: 8,
            renormalize_gates: false,
        }
    }

    #[test]
    fn valid_config_passes() {
        small().validate().unwrap();
    }

    #[test]
    fn budget_ordering_enforced() {
        let mut cfg = small();
        cfg.experts_active = 2;
        cfg.experts_intervention = 2;
        assert!(cfg.validate().is_err());
        cfg.experts_intervention = 5;
        assert!(cfg.validate().is_err());
        cfg.experts_active = 0;
        cfg.experts_intervention = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn arity_floor_enforced() {
        let mut cfg = small();
        cfg.concept_arities = vec![3, 1];
        assert!(cfg.validate().is_err());
        cfg.concept_arities = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_divisibility_enforced() {
        let mut cfg = small();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }
}
