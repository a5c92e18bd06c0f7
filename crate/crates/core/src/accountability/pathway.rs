//! Backtracking a prediction: task label -> concepts -> experts -> tokens.

use serde::{Deserialize, Serialize};

use crate::accountability::influence::{concept_influence, InfluenceReport};
use crate::data::ConceptSchema;
use crate::error::{Error, Result};
use crate::model::{argmax, ExampleTrace, TaskHead, TaskKind};

/// Whether a pathway was recorded before or after an intervention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathwayStage {
    Pre,
    Post,
}

/// One concept node in the decision chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub concept: String,
    pub predicted_value: String,
    pub predicted_index: usize,
    pub probability: f64,
    pub probabilities: Vec<f64>,
    /// Influence of this concept on the predicted task class (or the
    /// regression output).
    pub influence: f64,
    /// Selected `(expert, gate)` pairs per expert layer.
    pub experts_per_layer: Vec<Vec<(usize, f64)>>,
    /// Expert budget used at the final layer.
    pub budget: usize,
}

/// The full backtracked decision pathway for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathwayTrace {
    pub example_id: usize,
    pub stage: PathwayStage,
    pub task_prediction: String,
    pub task_logits: Vec<f64>,
    /// Concept nodes ordered by descending absolute influence.
    pub ranking: Vec<usize>,
    pub concepts: Vec<ConceptNode>,
    pub influence: InfluenceReport,
    pub tokens: Vec<usize>,
    /// Token surface forms when a vocabulary is supplied.
    pub words: Option<Vec<String>>,
}

impl PathwayTrace {
    /// Re-evaluate the head over the stored concept probabilities; equals
    /// the stored task logits bit-exactly (checked by `backtrack`).
    pub fn replayed_logits(&self, head: &TaskHead) -> Result<Vec<f64>> {
        let probs: Vec<Vec<f64>> =
            self.concepts.iter().map(|c| c.probabilities.clone()).collect();
        crate::model::head_predict(head, &probs)
    }
}

/// Assemble the decision pathway from a recorded trace.
///
/// Fails with a contract error if the trace was recorded without gate
/// records. `words` supplies token surface forms for readable reports.
pub fn backtrack(
    trace: &ExampleTrace,
    head: &TaskHead,
    schema: &ConceptSchema,
    task_kind: &TaskKind,
    stage: PathwayStage,
    words: Option<Vec<String>>,
) -> Result<PathwayTrace> {
    if !trace.has_gates() {
        return Err(Error::contract(
            "pathway backtracking needs gate records; re-run inference with gates enabled",
        ));
    }
    if trace.concept_probs.len() != schema.num_concepts() {
        return Err(Error::contract(format!(
            "trace has {} concepts, schema {}",
            trace.concept_probs.len(),
            schema.num_concepts()
        )));
    }
    let influence = concept_influence(trace, head, false)?;
    influence.verify_decomposition(1e-9)?;

    let (task_prediction, class_for_influence) = match task_kind {
        TaskKind::Classification { .. } => {
            let c = trace.task_prediction();
            let name = match &schema.task {
                crate::data::TaskSpec::Classification { classes } => classes
                    .get(c)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{c}")),
                _ => format!("class_{c}"),
            };
            (name, c)
        }
        TaskKind::Regression => (format!("{}", trace.task_logits[0]), 0),
    };
    let class_influence = influence.for_class(class_for_influence)?.to_vec();

    let concepts: Vec<ConceptNode> = (0..schema.num_concepts())
        .map(|k| {
            let probs = &trace.concept_probs[k];
            let predicted = argmax(probs);
            let experts_per_layer = trace
                .layers
                .iter()
                .map(|layer| layer[k].selected.clone())
                .collect();
            ConceptNode {
                concept: schema.concepts[k].name.clone(),
                predicted_value: schema.concepts[k].values[predicted].clone(),
                predicted_index: predicted,
                probability: probs[predicted],
                probabilities: probs.clone(),
                influence: class_influence[k],
                experts_per_layer,
                budget: trace.active_budgets[k],
            }
        })
        .collect();

    let mut ranking: Vec<usize> = (0..concepts.len()).collect();
    ranking.sort_by(|&a, &b| {
        concepts[b]
            .influence
            .abs()
            .partial_cmp(&concepts[a].influence.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let pathway = PathwayTrace {
        example_id: trace.example_id,
        stage,
        task_prediction,
        task_logits: trace.task_logits.clone(),
        ranking,
        concepts,
        influence,
        tokens: trace.tokens.clone(),
        words,
    };
    // replay identity: the stored logits must be reproducible from the head
    let replayed = pathway.replayed_logits(head)?;
    if replayed != pathway.task_logits {
        return Err(Error::Numeric(format!(
            "pathway replay mismatch: {replayed:?} vs {:?}",
            pathway.task_logits
        )));
    }
    Ok(pathway)
}

/// Per-concept change between a pre- and post-intervention pathway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDiff {
    pub concept: String,
    pub changed: bool,
    pub value_before: String,
    pub value_after: String,
    pub probability_before: f64,
    pub probability_after: f64,
    /// Selected experts per layer before/after.
    pub experts_before: Vec<Vec<usize>>,
    pub experts_after: Vec<Vec<usize>>,
    /// `(expert, gate_after - gate_before)` per layer; empty when the
    /// concept's routing is untouched.
    pub gate_deltas: Vec<Vec<(usize, f64)>>,
    pub budget_before: usize,
    pub budget_after: usize,
}

/// Structured pre/post comparison of one example's pathways.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionDiff {
    pub example_id: usize,
    pub task_before: String,
    pub task_after: String,
    pub task_changed: bool,
    pub concepts: Vec<ConceptDiff>,
}

impl InterventionDiff {
    pub fn is_empty(&self) -> bool {
        !self.task_changed && self.concepts.iter().all(|c| !c.changed)
    }
}

/// Diff two pathways of the same example under different budgets.
pub fn diff_interventions(pre: &PathwayTrace, post: &PathwayTrace) -> Result<InterventionDiff> {
    if pre.example_id != post.example_id {
        return Err(Error::contract(format!(
            "diff across different examples: {} vs {}",
            pre.example_id, post.example_id
        )));
    }
    if pre.concepts.len() != post.concepts.len() {
        return Err(Error::contract("pathways disagree on concept count"));
    }
    let concepts = pre
        .concepts
        .iter()
        .zip(&post.concepts)
        .map(|(a, b)| {
            let experts_before: Vec<Vec<usize>> = a
                .experts_per_layer
                .iter()
                .map(|l| l.iter().map(|&(e, _)| e).collect())
                .collect();
            let experts_after: Vec<Vec<usize>> = b
                .experts_per_layer
                .iter()
                .map(|l| l.iter().map(|&(e, _)| e).collect())
                .collect();
            let routing_changed = a.experts_per_layer != b.experts_per_layer;
            let gate_deltas: Vec<Vec<(usize, f64)>> = if routing_changed {
                a.experts_per_layer
                    .iter()
                    .zip(&b.experts_per_layer)
                    .map(|(la, lb)| {
                        let mut union: Vec<usize> =
                            la.iter().chain(lb.iter()).map(|&(e, _)| e).collect();
                        union.sort_unstable();
                        union.dedup();
                        union
                            .into_iter()
                            .map(|e| {
                                let ga = la.iter().find(|&&(x, _)| x == e).map_or(0.0, |&(_, g)| g);
                                let gb = lb.iter().find(|&&(x, _)| x == e).map_or(0.0, |&(_, g)| g);
                                (e, gb - ga)
                            })
                            .collect()
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let changed = routing_changed
                || a.predicted_index != b.predicted_index
                || a.probabilities != b.probabilities;
            ConceptDiff {
                concept: a.concept.clone(),
                changed,
                value_before: a.predicted_value.clone(),
                value_after: b.predicted_value.clone(),
                probability_before: a.probability,
                probability_after: b.probability,
                experts_before,
                experts_after,
                gate_deltas,
                budget_before: a.budget,
                budget_after: b.budget,
            }
        })
        .collect();
    Ok(InterventionDiff {
        example_id: pre.example_id,
        task_before: pre.task_prediction.clone(),
        task_after: post.task_prediction.clone(),
        task_changed: pre.task_prediction != post.task_prediction,
        concepts,
    })
}
