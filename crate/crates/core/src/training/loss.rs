//! Loss assembly: the weighted joint objective and the expert-importance
//! balancing regularizer, both computable from recorded traces (for
//! reporting and oracles) and on the tape (for training).

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TaskKind};
use crate::numerics::{log_sum_exp, softmax_into};

/// Per-term decomposition of the joint objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Task term: mean cross-entropy or RMSE.
    pub task: f64,
    /// Mean cross-entropy of each concept head.
    pub concept_terms: Vec<f64>,
    pub gamma: f64,
}

impl LossBreakdown {
    /// `task + gamma * sum(concept terms)`.
    pub fn total(&self) -> f64 {
        self.task + self.gamma * self.concept_terms.iter().sum::<f64>()
    }
}

/// Joint loss of a traced batch against its labels.
pub fn joint_loss(
    trace: &ForwardTrace,
    examples: &[Example],
    task: &TaskKind,
    gamma: f64,
) -> Result<LossBreakdown> {
    if trace.examples.len() != examples.len() || examples.is_empty() {
        return Err(Error::contract(format!(
            "joint_loss: {} traces vs {} labeled examples",
            trace.examples.len(),
            examples.len()
        )));
    }
    let n = examples.len() as f64;
    let num_concepts = examples[0].concepts.len();

    let task_term = match task {
        TaskKind::Classification { .. } => {
            let mut total = 0.0;
            for (t, ex) in trace.examples.iter().zip(examples) {
                let y = ex.label.class()?;
                if y >= t.task_logits.len() {
                    return Err(Error::Index(format!("label {y} out of range")));
                }
                total += log_sum_exp(&t.task_logits) - t.task_logits[y];
            }
            total / n
        }
        TaskKind::Regression => {
            let mut mse = 0.0;
            for (t, ex) in trace.examples.iter().zip(examples) {
                let y = ex.label.real()?;
                mse += (t.task_logits[0] - y) * (t.task_logits[0] - y);
            }
            (mse / n).sqrt()
        }
    };

    let mut concept_terms = Vec::with_capacity(num_concepts);
    for k in 0..num_concepts {
        let mut total = 0.0;
        for (t, ex) in trace.examples.iter().zip(examples) {
            let logits = &t.concept_logits[k];
            let c = ex.concepts[k];
            if c >= logits.len() {
                return Err(Error::Index(format!(
                    "concept {k} label {c} out of range"
                )));
            }
            total += log_sum_exp(logits) - logits[c];
        }
        concept_terms.push(total / n);
    }
    Ok(LossBreakdown {
        task: task_term,
        concept_terms,
        gamma,
    })
}

/// Balancing loss from recorded router logits: for every layer and concept,
/// the squared coefficient of variation of per-expert importance (summed
/// softmax mass over the batch). Zero iff importance is perfectly uniform.
pub fn balance_loss(trace: &ForwardTrace) -> Result<f64> {
    let first = trace
        .examples
        .first()
        .ok_or_else(|| Error::contract("balance_loss: empty batch"))?;
    if !first.has_gates() {
        return Err(Error::contract(
            "balance_loss: traces recorded without gate records",
        ));
    }
    let layers = first.layers.len();
    let concepts = first.layers[0].len();
    let mut total = 0.0;
    for layer in 0..layers {
        for k in 0..concepts {
            let m = first.layers[layer][k].router_logits.len();
            let mut importance = vec![0.0; m];
            let mut probs = vec![0.0; m];
            for ex in &trace.examples {
                softmax_into(&ex.layers[layer][k].router_logits, &mut probs);
                for (imp, &p) in importance.iter_mut().zip(&probs) {
                    *imp += p;
                }
            }
            total += cv_squared(&importance);
        }
    }
    Ok(total)
}

/// `var(x) / mean(x)^2`, the plain-value twin of the tape op.
pub fn cv_squared(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var / (mean * mean)
}

/// Extract labels for the tape-side loss builders.
pub fn class_labels<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Vec<usize>> {
    examples.into_iter().map(|e| e.label.class()).collect()
}

pub fn real_labels<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Vec<f64>> {
    examples.into_iter().map(|e| e.label.real()).collect()
}
