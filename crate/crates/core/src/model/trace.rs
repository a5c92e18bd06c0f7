//! Forward-pass recordings: everything one inference leaves behind.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Routing outcome for one concept in one expert layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    /// Raw router logits over all experts.
    pub router_logits: Vec<f64>,
    /// Kept experts and their gate values, ascending by expert index.
    pub selected: Vec<(usize, f64)>,
}

impl GateRecord {
    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected.iter().map(|&(i, _)| i).collect()
    }
}

/// Complete record of one example's inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleTrace {
    pub example_id: usize,
    pub tokens: Vec<usize>,
    /// Expert budget used per concept (the same plan at every layer unless
    /// the intervention was scoped to the final layer).
    pub active_budgets: Vec<usize>,
    /// Gate records indexed `[moce_layer][concept]`; empty when gate
    /// recording was disabled.
    pub layers: Vec<Vec<GateRecord>>,
    /// Raw concept logits, one vector per concept.
    pub concept_logits: Vec<Vec<f64>>,
    /// Per-concept softmax probabilities.
    pub concept_probs: Vec<Vec<f64>>,
    /// Task logits (classification) or the single regression output.
    pub task_logits: Vec<f64>,
}

impl ExampleTrace {
    pub fn has_gates(&self) -> bool {
        !self.layers.is_empty()
    }

    /// Argmax value index per concept, ties toward the lower index.
    pub fn concept_predictions(&self) -> Vec<usize> {
        self.concept_probs.iter().map(|p| argmax(p)).collect()
    }

    /// Argmax task class (classification) — for regression use `task_logits[0]`.
    pub fn task_prediction(&self) -> usize {
        argmax(&self.task_logits)
    }

    /// Router gate record of the final expert layer for one concept.
    pub fn final_layer_gates(&self, concept: usize) -> Result<&GateRecord> {
        self.layers
            .last()
            .and_then(|l| l.get(concept))
            .ok_or_else(|| Error::contract("trace recorded without gate records"))
    }
}

/// Batch of example traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub examples: Vec<ExampleTrace>,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
