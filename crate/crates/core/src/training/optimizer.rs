//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

/// Update rule: RMS-normalized adaptive steps (default) or plain SGD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    RmsNorm,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rms" | "rms_norm" => Ok(OptimizerKind::RmsNorm),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Momentum-free optimizer; RMS mode keeps a running mean of squared
/// gradients per parameter.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta: f64,
    eps: f64,
    state: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Optimizer {
        Optimizer {
            kind,
            lr,
            beta: 0.9,
            eps: 1e-8,
            state: Vec::new(),
        }
    }

    /// Apply one step. `grads` must align with `Model::visit_params` order.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) -> Result<()> {
        let mut sizes = Vec::new();
        model.visit_params(&mut |_, t| sizes.push(t.len()));
        if sizes.len() != grads.len() {
            return Err(Error::contract(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                sizes.len()
            )));
        }
        if self.state.is_empty() && self.kind == OptimizerKind::RmsNorm {
            self.state = sizes.iter().map(|&n| vec![0.0; n]).collect();
        }
        let mut idx = 0;
        let (kind, lr, beta, eps) = (self.kind, self.lr, self.beta, self.eps);
        let state = &mut self.state;
        let mut failure = None;
        model.visit_params_mut(&mut |t| {
            let g = &grads[idx];
            if g.len() != t.len() {
                failure = Some(Error::contract(format!(
                    "gradient {idx} has {} values, parameter has {}",
                    g.len(),
                    t.len()
                )));
                return;
            }
            match kind {
                OptimizerKind::Sgd => {
                    for (p, &gv) in t.data_mut().iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
                OptimizerKind::RmsNorm => {
                    let v = &mut state[idx];
                    for ((p, &gv), vi) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = beta * *vi + (1.0 - beta) * gv * gv;
                        *p -= lr * gv / (vi.sqrt() + eps);
                    }
                }
            }
            idx += 1;
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TaskKind};

    fn model() -> Model {
        let cfg = ModelConfig {
            vocab_size: 8,
            max_seq_len: 4,
            embed_dim: 4,
            num_heads: 1,
            num_attention_layers: 0,
            num_moce_layers: 1,
            num_experts: 2,
            experts_active: 1,
            experts_intervention: 2,
            concept_arities: vec![2],
            task_kind: TaskKind::Classification { classes: 2 },
            router_hidden_dim: 2,
            expert_hidden_dim: 2,
            renormalize_gates: false,
        };
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut m = model();
        let before = m.flatten_params();
        let mut grads = Vec::new();
        m.visit_params(&mut |_, t| grads.push(vec![1.0; t.len()]));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.step(&mut m, &grads).unwrap();
        for (a, b) in before.iter().zip(m.flatten_params()) {
            assert!((a - 0.1 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rms_normalizes_step_size() {
        let mut m = model();
        let before = m.flatten_params();
        let mut grads = Vec::new();
        // gradients of very different magnitude produce comparable steps
        m.visit_params(&mut |_, t| grads.push(vec![100.0; t.len()]));
        let mut opt = Optimizer::new(OptimizerKind::RmsNorm, 0.01);
        opt.step(&mut m, &grads).unwrap();
        for (a, b) in before.iter().zip(m.flatten_params()) {
            let step = a - b;
            // g / (sqrt(0.1 * g^2) + eps) ~= 1/sqrt(0.1)
            assert!((step - 0.01 / 0.1f64.sqrt()).abs() < 1e-6);
        }
    }
}
