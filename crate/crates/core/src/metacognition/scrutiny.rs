//! Error flagging: fit per-concept thresholds on one split, then tag
//! predictions whose routing *and* concept confidence both look suspect.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metacognition::cluster::{fit_two_means, ThresholdFit};
use crate::metacognition::entropy::{entropy_records, EntropyRecord, ScrutinyStatistic};
use crate::model::ForwardTrace;

/// Fitted thresholds for one concept. `None` marks a degenerate fit (all
/// values identical), which disables flagging for that quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptThresholds {
    pub routing: Option<ThresholdFit>,
    pub concept: Option<ThresholdFit>,
}

/// Per-concept thresholds plus the statistic they were fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub statistic: ScrutinyStatistic,
    pub per_concept: Vec<ConceptThresholds>,
}

/// Fit thresholds from a (typically dev) trace.
///
/// Degenerate fits are recorded as `None` rather than failing the whole
/// batch: those concepts simply never flag.
pub fn fit_thresholds(trace: &ForwardTrace, statistic: ScrutinyStatistic) -> Result<Thresholds> {
    let records = entropy_records(trace, statistic)?;
    let num_concepts = trace
        .examples
        .first()
        .map(|e| e.concept_logits.len())
        .ok_or_else(|| Error::contract("cannot fit thresholds on an empty trace"))?;
    let mut per_concept = Vec::with_capacity(num_concepts);
    for k in 0..num_concepts {
        let routing: Vec<f64> = records
            .iter()
            .filter(|r| r.concept == k)
            .map(|r| r.routing_score)
            .collect();
        let concept: Vec<f64> = records
            .iter()
            .filter(|r| r.concept == k)
            .map(|r| r.concept_score)
            .collect();
        let fit = |values: &[f64]| match fit_two_means(values) {
            Ok(f) => Ok(Some(f)),
            Err(Error::DegenerateFit(_)) => Ok(None),
            Err(e) => Err(e),
        };
        per_concept.push(ConceptThresholds {
            routing: fit(&routing)?,
            concept: fit(&concept)?,
        });
    }
    Ok(Thresholds {
        statistic,
        per_concept,
    })
}

/// One flagging decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub example_id: usize,
    pub concept: usize,
    pub routing_score: f64,
    pub concept_score: f64,
    pub routing_threshold: Option<f64>,
    pub concept_threshold: Option<f64>,
    pub flagged: bool,
}

/// Scrutiny outcome for a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScrutinyReport {
    pub statistic: ScrutinyStatistic,
    pub thresholds: Thresholds,
    pub records: Vec<FlagRecord>,
    pub flagged: usize,
    pub total: usize,
}

impl ScrutinyReport {
    /// Flag matrix indexed `[example][concept]`, in trace order.
    pub fn flag_matrix(&self, num_examples: usize, num_concepts: usize) -> Vec<Vec<bool>> {
        let mut out = vec![vec![false; num_concepts]; num_examples];
        for (i, rec) in self.records.iter().enumerate() {
            let ex = i / num_concepts;
            out[ex][rec.concept] = rec.flagged;
        }
        out
    }

    /// One row per example x concept.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "example_id,concept,routing_score,concept_score,routing_threshold,concept_threshold,flagged\n",
        );
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.example_id,
                r.concept,
                r.routing_score,
                r.concept_score,
                fmt(r.routing_threshold),
                fmt(r.concept_threshold),
                r.flagged
            ));
        }
        out
    }
}

fn is_suspect(score: f64, fit: &ThresholdFit, statistic: ScrutinyStatistic) -> bool {
    match statistic {
        // high entropy = low confidence
        ScrutinyStatistic::Entropy => score > fit.threshold,
        // low max-probability = low confidence
        ScrutinyStatistic::MaxProbability => score < fit.threshold,
    }
}

/// Flag each (example, concept) whose routing and concept confidence are
/// both past their thresholds.
pub fn flag(trace: &ForwardTrace, thresholds: &Thresholds) -> Result<ScrutinyReport> {
    let records = entropy_records(trace, thresholds.statistic)?;
    let mut flags = Vec::with_capacity(records.len());
    let mut flagged = 0usize;
    for rec in &records {
        let th = thresholds
            .per_concept
            .get(rec.concept)
            .ok_or_else(|| Error::contract("thresholds fitted for fewer concepts"))?;
        let decision = match (&th.routing, &th.concept) {
            (Some(r), Some(c)) => {
                is_suspect(rec.routing_score, r, thresholds.statistic)
                    && is_suspect(rec.concept_score, c, thresholds.statistic)
            }
            // degenerate fit: fall back to never flagging this concept
            _ => false,
        };
        if decision {
            flagged += 1;
        }
        flags.push(FlagRecord {
            example_id: rec.example_id,
            concept: rec.concept,
            routing_score: rec.routing_score,
            concept_score: rec.concept_score,
            routing_threshold: th.routing.as_ref().map(|f| f.threshold),
            concept_threshold: th.concept.as_ref().map(|f| f.threshold),
            flagged: decision,
        });
    }
    let total = flags.len();
    Ok(ScrutinyReport {
        statistic: thresholds.statistic,
        thresholds: thresholds.clone(),
        records: flags,
        flagged,
        total,
    })
}

/// Raw statistic values paired with prediction correctness, for external
/// plotting of the confidence distributions.
pub fn entropy_values_csv(records: &[EntropyRecord], correct: &[Vec<bool>]) -> String {
    let mut out = String::from("example_id,concept,quantity,value,prediction_correct\n");
    for (i, r) in records.iter().enumerate() {
        let num_concepts = correct.first().map(|c| c.len()).unwrap_or(1);
        let ex = i / num_concepts;
        let ok = correct
            .get(ex)
            .and_then(|c| c.get(r.concept))
            .copied()
            .unwrap_or(false);
        out.push_str(&format!(
            "{},{},routing,{},{}\n",
            r.example_id, r.concept, r.routing_score, ok
        ));
        out.push_str(&format!(
            "{},{},concept,{},{}\n",
            r.example_id, r.concept, r.concept_score, ok
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExampleTrace, GateRecord};

    fn trace_one(example_id: usize, router_logits: Vec<f64>, concept_logits: Vec<f64>) -> ExampleTrace {
        ExampleTrace {
            example_id,
            tokens: vec![0],
            active_budgets: vec![1],
            layers: vec![vec![GateRecord {
                router_logits,
                selected: vec![(0, 1.0)],
            }]],
            concept_logits: vec![concept_logits.clone()],
            concept_probs: vec![concept_logits],
            task_logits: vec![0.0, 0.0],
        }
    }

    fn fitted(trace: &ForwardTrace) -> Thresholds {
        fit_thresholds(trace, ScrutinyStatistic::Entropy).unwrap()
    }

    #[test]
    fn and_rule_applies() {
        // two confident examples, two uncertain, enough spread for the fit
        let trace = ForwardTrace {
            examples: vec![
                trace_one(0, vec![9.0, -9.0, -9.0], vec![9.0, -9.0, -9.0]),
                trace_one(1, vec![8.0, -8.0, -8.0], vec![8.0, -8.0, -8.0]),
                trace_one(2, vec![0.1, 0.0, 0.0], vec![0.1, 0.0, 0.0]),
                trace_one(3, vec![0.0, 0.1, 0.0], vec![9.0, -9.0, -9.0]),
            ],
        };
        let thresholds = fitted(&trace);
        let report = flag(&trace, &thresholds).unwrap();
        // example 2: both entropies high -> flagged
        assert!(report.records[2].flagged);
        // example 3: routing entropy high, concept entropy low -> not flagged
        assert!(!report.records[3].flagged);
        // example 0: both low -> not flagged
        assert!(!report.records[0].flagged);
        assert_eq!(report.flagged, 1);
    }

    #[test]
    fn degenerate_concept_never_flags() {
        // identical routing entropies for every example: routing fit is
        // degenerate, so nothing can be flagged
        let trace = ForwardTrace {
            examples: vec![
                trace_one(0, vec![1.0, 1.0, 1.0], vec![5.0, -5.0, 0.0]),
                trace_one(1, vec![1.0, 1.0, 1.0], vec![0.0, 0.1, 0.0]),
            ],
        };
        let thresholds = fitted(&trace);
        assert!(thresholds.per_concept[0].routing.is_none());
        assert!(thresholds.per_concept[0].concept.is_some());
        let report = flag(&trace, &thresholds).unwrap();
        assert_eq!(report.flagged, 0);
    }

    #[test]
    fn max_probability_statistic_inverts_direction() {
        let trace = ForwardTrace {
            examples: vec![
                trace_one(0, vec![9.0, -9.0, -9.0], vec![9.0, -9.0, -9.0]),
                trace_one(1, vec![0.0, 0.1, 0.0], vec![0.1, 0.0, 0.0]),
            ],
        };
        let thresholds = fit_thresholds(&trace, ScrutinyStatistic::MaxProbability).unwrap();
        let report = flag(&trace, &thresholds).unwrap();
        // low max-probability (example 1) is the suspect side
        assert!(!report.records[0].flagged);
        assert!(report.records[1].flagged);
    }
}
