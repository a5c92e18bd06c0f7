//! Per-concept influence on task logits via the linear head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExampleTrace, TaskHead};

/// Additive decomposition of every task logit into per-concept
/// contributions: `logit[c] = bias[c] + sum_k influence[c][k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    /// `influence[class][concept]`; regression uses a single row.
    pub influence: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Task logits the decomposition reproduces.
    pub task_logits: Vec<f64>,
    /// Whether raw concept logits were used instead of probabilities.
    /// The decomposition identity holds only for probabilities.
    pub from_logits: bool,
}

impl InfluenceReport {
    /// Influence of each concept on one class.
    pub fn for_class(&self, class: usize) -> Result<&[f64]> {
        self.influence
            .get(class)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Index(format!("class {class} out of range")))
    }

    /// Check `sum_k I_k(class) + bias == logit(class)` for every class.
    pub fn verify_decomposition(&self, tol: f64) -> Result<()> {
        if self.from_logits {
            return Ok(()); // identity only holds for the probability input
        }
        for (c, row) in self.influence.iter().enumerate() {
            let total: f64 = row.iter().sum::<f64>() + self.bias[c];
            if (total - self.task_logits[c]).abs() > tol {
                return Err(Error::Numeric(format!(
                    "influence decomposition off by {} for class {c}",
                    (total - self.task_logits[c]).abs()
                )));
            }
        }
        Ok(())
    }
}

/// Dot each concept's activation block against the head weights.
///
/// `a_k` is the concept's probability vector by default; pass
/// `from_logits = true` to use the raw logits instead.
pub fn concept_influence(
    trace: &ExampleTrace,
    head: &TaskHead,
    from_logits: bool,
) -> Result<InfluenceReport> {
    let activations = if from_logits {
        &trace.concept_logits
    } else {
        &trace.concept_probs
    };
    let concept_dim: usize = activations.iter().map(|a| a.len()).sum();
    let out_dim = head.b.len();
    if head.w.shape() != [concept_dim, out_dim] {
        return Err(Error::shape(format!(
            "head weights {:?} do not match concept dim {} x outputs {}",
            head.w.shape(),
            concept_dim,
            out_dim
        )));
    }
    let mut influence = vec![vec![0.0; activations.len()]; out_dim];
    let mut offset = 0usize;
    for (k, a) in activations.iter().enumerate() {
        for (j, &av) in a.iter().enumerate() {
            let row = offset + j;
            for c in 0..out_dim {
                influence[c][k] += av * head.w.data()[row * out_dim + c];
            }
        }
        offset += a.len();
    }
    Ok(InfluenceReport {
        influence,
        bias: head.b.data().to_vec(),
        task_logits: trace.task_logits.clone(),
        from_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn trace_with_probs(probs: Vec<Vec<f64>>, task_logits: Vec<f64>) -> ExampleTrace {
        ExampleTrace {
            example_id: 0,
            tokens: vec![0],
            active_budgets: vec![1; probs.len()],
            layers: vec![],
            concept_logits: probs.clone(),
            concept_probs: probs,
            task_logits,
        }
    }

    #[test]
    fn single_concept_dot_product() {
        // a = [0.1, 0.2, 0.7], w = [-1, 0, 1] -> influence 0.6
        let head = TaskHead {
            w: Tensor::matrix(3, 1, vec![-1.0, 0.0, 1.0]).unwrap(),
            b: Tensor::zeros(vec![1]),
        };
        let trace = trace_with_probs(vec![vec![0.1, 0.2, 0.7]], vec![0.6]);
        let report = concept_influence(&trace, &head, false).unwrap();
        assert!((report.influence[0][0] - 0.6).abs() < 1e-12);
        report.verify_decomposition(1e-9).unwrap();
    }

    #[test]
    fn zero_weights_zero_influence() {
        let head = TaskHead {
            w: Tensor::zeros(vec![5, 2]),
            b: Tensor::zeros(vec![2]),
        };
        let trace = trace_with_probs(vec![vec![0.5, 0.5], vec![0.2, 0.3, 0.5]], vec![0.0, 0.0]);
        let report = concept_influence(&trace, &head, false).unwrap();
        for row in &report.influence {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn decomposition_is_exact_on_random_traces() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let arities = [3usize, 2, 4];
            let out_dim = 5usize;
            let concept_dim: usize = arities.iter().sum();
            let w: Vec<f64> = (0..concept_dim * out_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let b: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let head = TaskHead {
                w: Tensor::matrix(concept_dim, out_dim, w.clone()).unwrap(),
                b: Tensor::from_vec(vec![out_dim], b.clone()).unwrap(),
            };
            let probs: Vec<Vec<f64>> = arities
                .iter()
                .map(|&a| {
                    let raw: Vec<f64> = (0..a).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / sum).collect()
                })
                .collect();
            // live logits from the same linear map
            let mut logits = b.clone();
            let mut offset = 0;
            for a in &probs {
                for (j, &av) in a.iter().enumerate() {
                    for c in 0..out_dim {
                        logits[c] += av * w[(offset + j) * out_dim + c];
                    }
                }
                offset += a.len();
            }
            let trace = trace_with_probs(probs, logits);
            let report = concept_influence(&trace, &head, false).unwrap();
            report.verify_decomposition(1e-9).unwrap();
        }
    }

    #[test]
    fn logit_variant_skips_identity_check() {
        let head = TaskHead {
            w: Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
            b: Tensor::zeros(vec![1]),
        };
        let mut trace = trace_with_probs(vec![vec![0.5, 0.5]], vec![1.0]);
        trace.concept_logits = vec![vec![3.0, -3.0]];
        let report = concept_influence(&trace, &head, true).unwrap();
        assert!(report.from_logits);
        report.verify_decomposition(1e-9).unwrap(); // no-op by design
        assert!((report.influence[0][0] - 0.0).abs() < 1e-12);
    }
}
