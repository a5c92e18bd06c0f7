//! Confidence statistics over routing and concept logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::numerics::softmax_into;

/// Which statistic the scrutiny pipeline clusters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrutinyStatistic {
    /// Shannon entropy of the softmax distribution (low confidence = high).
    Entropy,
    /// Maximum softmax probability (low confidence = low).
    MaxProbability,
}

impl std::str::FromStr for ScrutinyStatistic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(ScrutinyStatistic::Entropy),
            "max_prob" | "max_probability" => Ok(ScrutinyStatistic::MaxProbability),
            other => Err(Error::config(format!("unknown statistic '{other}'"))),
        }
    }
}

/// Shannon entropy (nats) of the softmax of `logits`, with `0 log 0 = 0`.
pub fn shannon_entropy(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::contract(format!(
            "entropy needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    let mut probs = vec![0.0; logits.len()];
    softmax_into(logits, &mut probs);
    let mut h = 0.0;
    for &p in &probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h.max(0.0))
}

fn max_probability(logits: &[f64]) -> f64 {
    let mut probs = vec![0.0; logits.len()];
    softmax_into(logits, &mut probs);
    probs.iter().cloned().fold(0.0, f64::max)
}

fn statistic_of(logits: &[f64], statistic: ScrutinyStatistic) -> Result<f64> {
    match statistic {
        ScrutinyStatistic::Entropy => shannon_entropy(logits),
        ScrutinyStatistic::MaxProbability => {
            if logits.len() < 2 {
                return Err(Error::contract("statistic needs at least 2 logits"));
            }
            Ok(max_probability(logits))
        }
    }
}

/// Per-(example, concept) confidence statistics: the routing distribution of
/// the final expert layer and the concept prediction distribution.
///
/// Under the default statistic both scores are entropies in nats; under
/// `MaxProbability` they hold the top softmax probability instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub example_id: usize,
    pub concept: usize,
    /// Statistic over the final layer's router softmax (M options).
    pub routing_score: f64,
    /// Statistic over the concept softmax (arity options).
    pub concept_score: f64,
}

/// Compute records for every example and concept in a trace.
///
/// Requires gate records (the routing statistic reads the final expert
/// layer's router logits).
pub fn entropy_records(
    trace: &ForwardTrace,
    statistic: ScrutinyStatistic,
) -> Result<Vec<EntropyRecord>> {
    let mut out = Vec::new();
    for ex in &trace.examples {
        let num_concepts = ex.concept_logits.len();
        for k in 0..num_concepts {
            let gates = ex.final_layer_gates(k)?;
            let routing = statistic_of(&gates.router_logits, statistic)?;
            let concept = statistic_of(&ex.concept_logits[k], statistic)?;
            if statistic == ScrutinyStatistic::Entropy {
                let m = gates.router_logits.len() as f64;
                let arity = ex.concept_logits[k].len() as f64;
                if routing > m.ln() + 1e-9 || concept > arity.ln() + 1e-9 {
                    return Err(Error::Numeric("entropy above ln(n) bound".into()));
                }
            }
            out.push(EntropyRecord {
                example_id: ex.example_id,
                concept: k,
                routing_score: routing,
                concept_score: concept,
            });
        }
    }
    Ok(out)
}
