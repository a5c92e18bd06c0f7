//! Analytic multiply-add estimates for one forward pass.
//!
//! Counts matrix-product multiply-adds only (norms, softmax, and activations
//! are ignored); the expert term is linear in the summed per-concept budget
//! by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

/// Multiply-add counts per token, split by component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub attention: f64,
    pub routers: f64,
    pub experts: f64,
    pub projector: f64,
    pub head: f64,
}

impl FlopsEstimate {
    pub fn total(&self) -> f64 {
        self.attention + self.routers + self.experts + self.projector + self.head
    }
}

/// Per-token multiply-add estimate at the given per-concept expert budgets,
/// for sequences of `seq_len` tokens.
pub fn count_flops(config: &ModelConfig, active: &[usize], seq_len: usize) -> Result<FlopsEstimate> {
    config.validate()?;
    if active.len() != config.num_concepts() {
        return Err(Error::config(format!(
            "{} budgets for {} concepts",
            active.len(),
            config.num_concepts()
        )));
    }
    for &t in active {
        if t < 1 || t > config.num_experts {
            return Err(Error::config(format!(
                "budget {} outside [1, {}]",
                t, config.num_experts
            )));
        }
    }
    if seq_len == 0 || seq_len > config.max_seq_len {
        return Err(Error::config(format!(
            "seq_len {} outside [1, {}]",
            seq_len, config.max_seq_len
        )));
    }
    let s = seq_len as f64;
    let e = config.embed_dim as f64;

    // Each attention block: QKVO projections (4·E² per token) plus score and
    // mixing products (2·S·E per token).
    let blocks = (config.num_attention_layers + config.num_moce_layers) as f64;
    let attention = blocks * (4.0 * e * e + 2.0 * s * e);

    // Routers run once per sequence (pooled routing), every expert layer.
    let layers = config.num_moce_layers as f64;
    let k = config.num_concepts() as f64;
    let router_one = (config.embed_dim * config.router_hidden_dim
        + config.router_hidden_dim * config.num_experts) as f64;
    let routers = layers * k * router_one / s;

    // Expert mixture: the double sum over concepts and kept experts runs
    // sum(active) expert MLPs per layer, each 2·E·hidden per token.
    let budget_sum: usize = active.iter().sum();
    let expert_one = 2.0 * e * config.expert_hidden_dim as f64;
    let experts = layers * budget_sum as f64 * expert_one;

    // Projector and head run once per sequence.
    let projector = (config.embed_dim * config.concept_dim()) as f64 / s;
    let head = (config.concept_dim() * config.task_kind.output_dim()) as f64 / s;

    Ok(FlopsEstimate {
        attention,
        routers,
        experts,
        projector,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::TaskKind;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 50,
            max_seq_len: 16,
            embed_dim: 8,
            num_heads: 2,
            num_attention_layers: 1,
            num_moce_layers: 2,
            num_experts: 4,
            experts_active: 1,
            experts_intervention: 3,
            concept_arities: vec![3, 3],
            task_kind: TaskKind::Classification { classes: 5 },
            router_hidden_dim: 6,
            expert_hidden_dim: 10,
            renormalize_gates: false,
        }
    }

    #[test]
    fn doubling_budgets_doubles_expert_term() {
        let cfg = cfg();
        let a = count_flops(&cfg, &[1, 1], 8).unwrap();
        let b = count_flops(&cfg, &[2, 2], 8).unwrap();
        assert_eq!(b.experts, 2.0 * a.experts);
        assert_eq!(b.attention, a.attention);
        assert_eq!(b.routers, a.routers);
    }

    #[test]
    fn full_budget_matches_dense_double_sum() {
        let cfg = cfg();
        let dense = count_flops(&cfg, &[4, 4], 8).unwrap();
        // dense mixture: every concept sums over all M experts
        let layers = cfg.num_moce_layers as f64;
        let expect = layers
            * (cfg.num_concepts() * cfg.num_experts) as f64
            * 2.0
            * (cfg.embed_dim * cfg.expert_hidden_dim) as f64;
        assert_eq!(dense.experts, expect);
    }

    #[test]
    fn hand_counted_config_matches() {
        // E=8, S=8, hidden=10, router hidden=6, M=4, K=2, arities 3+3,
        // classes=5, 3 attention blocks total, 2 expert layers.
        let cfg = cfg();
        let est = count_flops(&cfg, &[1, 2], 8).unwrap();
        // attention: 3 blocks * (4*64 + 2*8*8) = 3 * (256 + 128) = 1152
        assert_eq!(est.attention, 1152.0);
        // routers: 2 layers * 2 concepts * (8*6 + 6*4) / 8 = 2*2*72/8 = 36
        assert_eq!(est.routers, 36.0);
        // experts: 2 layers * (1+2) budget * 2*8*10 = 2*3*160 = 960
        assert_eq!(est.experts, 960.0);
        // projector: 8 * 6 / 8 = 6
        assert_eq!(est.projector, 6.0);
        // head: 6 * 5 / 8 = 3.75
        assert_eq!(est.head, 3.75);
        assert_eq!(est.total(), 1152.0 + 36.0 + 960.0 + 6.0 + 3.75);
    }

    #[test]
    fn estimate_is_affine_in_budget_with_positive_slope() {
        let cfg = cfg();
        let totals: Vec<f64> = (1..=cfg.num_experts)
            .map(|b| count_flops(&cfg, &[b, b], 8).unwrap().total())
            .collect();
        let d0 = totals[1] - totals[0];
        assert!(d0 > 0.0);
        for w in totals.windows(2) {
            assert!((w[1] - w[0] - d0).abs() < 1e-9);
        }
    }

    #[test]
    fn budget_out_of_range_is_config_error() {
        let cfg = cfg();
        assert!(count_flops(&cfg, &[5, 1], 8).is_err());
        assert!(count_flops(&cfg, &[0, 1], 8).is_err());
    }
}
