//! Evaluation metrics: macro-F1 and RMSE.

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TaskKind};

/// Task-level score. Macro-F1 improves upward, RMSE downward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", content = "value", rename_all = "snake_case")]
pub enum TaskMetric {
    MacroF1(f64),
    Rmse(f64),
}

impl TaskMetric {
    pub fn value(&self) -> f64 {
        match self {
            TaskMetric::MacroF1(v) | TaskMetric::Rmse(v) => *v,
        }
    }

    /// True if `self` is a strictly better score than `other`.
    pub fn better_than(&self, other: &TaskMetric) -> bool {
        match (self, other) {
            (TaskMetric::MacroF1(a), TaskMetric::MacroF1(b)) => a > b,
            (TaskMetric::Rmse(a), TaskMetric::Rmse(b)) => a < b,
            _ => false,
        }
    }
}

/// Metrics over one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Macro-F1 of each concept head, in schema order.
    pub per_concept_f1: Vec<f64>,
    /// Unweighted mean of the per-concept macro-F1 scores.
    pub concept_macro_f1: f64,
    pub task: TaskMetric,
}

/// Macro-averaged F1 over classes, in `[0, 1]`.
///
/// Convention: a class's F1 is 0 when precision + recall is 0; classes
/// absent from both truth and prediction are skipped entirely.
pub fn macro_f1(truths: &[usize], preds: &[usize], num_classes: usize) -> Result<f64> {
    if truths.len() != preds.len() {
        return Err(Error::contract(format!(
            "macro_f1: {} truths vs {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::contract("macro_f1: empty input"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnn = vec![0usize; num_classes];
    for (&t, &p) in truths.iter().zip(preds) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Index(format!(
                "macro_f1: class out of range (truth {t}, pred {p}, classes {num_classes})"
            )));
        }
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        if tp[c] + fp[c] + fnn[c] == 0 {
            continue; // absent from truth and prediction
        }
        let denom = 2 * tp[c] + fp[c] + fnn[c];
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        };
        total += f1;
        counted += 1;
    }
    Ok(total / counted as f64)
}

pub fn rmse_metric(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::contract("rmse_metric: length mismatch or empty"));
    }
    let mse = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(mse.sqrt())
}

/// Concept and task metrics from a batch of traces paired with ground truth.
pub fn metrics_from_traces(
    trace: &ForwardTrace,
    examples: &[Example],
    task: &TaskKind,
) -> Result<Metrics> {
    if trace.examples.len() != examples.len() {
        return Err(Error::contract(format!(
            "{} traces vs {} examples",
            trace.examples.len(),
            examples.len()
        )));
    }
    if examples.is_empty() {
        return Err(Error::contract("metrics over an empty split"));
    }
    let num_concepts = examples[0].concepts.len();
    let mut per_concept = Vec::with_capacity(num_concepts);
    for k in 0..num_concepts {
        let truths: Vec<usize> = examples.iter().map(|e| e.concepts[k]).collect();
        let preds: Vec<usize> = trace
            .examples
            .iter()
            .map(|t| crate::model::argmax(&t.concept_probs[k]))
            .collect();
        let arity = trace.examples[0].concept_probs[k].len();
        per_concept.push(macro_f1(&truths, &preds, arity)?);
    }
    let concept_macro_f1 = per_concept.iter().sum::<f64>() / num_concepts as f64;

    let task_metric = match task {
        TaskKind::Classification { classes } => {
            let truths: Vec<usize> = examples
                .iter()
                .map(|e| e.label.class())
                .collect::<Result<_>>()?;
            let preds: Vec<usize> = trace.examples.iter().map(|t| t.task_prediction()).collect();
            TaskMetric::MacroF1(macro_f1(&truths, &preds, *classes)?)
        }
        TaskKind::Regression => {
            let truths: Vec<f64> = examples
                .iter()
                .map(|e| e.label.real())
                .collect::<Result<_>>()?;
            let preds: Vec<f64> = trace.examples.iter().map(|t| t.task_logits[0]).collect();
            TaskMetric::Rmse(rmse_metric(&preds, &truths)?)
        }
    };
    Ok(Metrics {
        per_concept_f1: per_concept,
        concept_macro_f1,
        task: task_metric,
    })
}
