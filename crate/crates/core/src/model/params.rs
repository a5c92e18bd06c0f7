//! Parameter containers, seeded initialization, and named traversal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::config::ModelConfig;
use crate::numerics::Tensor;

/// Layer normalization gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::from_vec(vec![dim], vec![1.0; dim]).unwrap(),
            beta: Tensor::zeros(vec![dim]),
        }
    }
}

/// Pre-norm multi-head self-attention block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub wq: Tensor,
    pub bq: Tensor,
    /// Key projection carries no bias: a constant key shift adds the same
    /// offset to every score in a row, which softmax cancels exactly.
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Per-concept shallow router MLP producing one logit per expert.
#[derive(Clone, Debug)]
pub struct Router {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Two-layer expert MLP, residual-compatible (`E -> hidden -> E`).
#[derive(Clone, Debug)]
pub struct ExpertMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Attention plus a bank of shared experts gated per concept.
#[derive(Clone, Debug)]
pub struct MoceLayer {
    pub attn: AttentionBlock,
    pub norm2: LayerNorm,
    /// One router per concept.
    pub routers: Vec<Router>,
    /// Experts shared across concepts within the layer.
    pub experts: Vec<ExpertMlp>,
}

/// Linear map from the pooled embedding to one concept's value logits.
#[derive(Clone, Debug)]
pub struct ConceptHead {
    pub w: Tensor,
    pub b: Tensor,
}

/// Per-concept projection heads.
#[derive(Clone, Debug)]
pub struct ConceptProjector {
    pub heads: Vec<ConceptHead>,
}

/// Purely linear task head over concatenated concept probabilities.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub w: Tensor,
    pub b: Tensor,
}

/// The full model: embeddings, attention stack, expert layers, bottleneck.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub attention_layers: Vec<AttentionBlock>,
    pub moce_layers: Vec<MoceLayer>,
    pub final_norm: LayerNorm,
    pub projector: ConceptProjector,
    pub head: TaskHead,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| normal(rng) * std).collect();
    Tensor::from_vec(vec![rows, cols], data).unwrap()
}

/// Box-Muller standard normal; keeps initialization independent of any
/// distribution crate's internals.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_attention(rng: &mut ChaCha8Rng, e: usize) -> AttentionBlock {
    AttentionBlock {
        norm: LayerNorm::new(e),
        wq: init_matrix(rng, e, e),
        bq: Tensor::zeros(vec![e]),
        wk: init_matrix(rng, e, e),
        wv: init_matrix(rng, e, e),
        bv: Tensor::zeros(vec![e]),
        wo: init_matrix(rng, e, e),
        bo: Tensor::zeros(vec![e]),
    }
}

impl Model {
    /// Fresh model with seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> crate::error::Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed_dim;
        let token_embedding = {
            let data = (0..config.vocab_size * e).map(|_| normal(&mut rng) * 0.02).collect();
            Tensor::from_vec(vec![config.vocab_size, e], data).unwrap()
        };
        let position_embedding = {
            let data = (0..config.max_seq_len * e).map(|_| normal(&mut rng) * 0.02).collect();
            Tensor::from_vec(vec![config.max_seq_len, e], data).unwrap()
        };
        let attention_layers = (0..config.num_attention_layers)
            .map(|_| init_attention(&mut rng, e))
            .collect();
        let moce_layers = (0..config.num_moce_layers)
            .map(|_| MoceLayer {
                attn: init_attention(&mut rng, e),
                norm2: LayerNorm::new(e),
                routers: (0..config.num_concepts())
                    .map(|_| Router {
                        w1: init_matrix(&mut rng, e, config.router_hidden_dim),
                        b1: Tensor::zeros(vec![config.router_hidden_dim]),
                        w2: init_matrix(&mut rng, config.router_hidden_dim, config.num_experts),
                        b2: Tensor::zeros(vec![config.num_experts]),
                    })
                    .collect(),
                experts: (0..config.num_experts)
                    .map(|_| ExpertMlp {
                        w1: init_matrix(&mut rng, e, config.expert_hidden_dim),
                        b1: Tensor::zeros(vec![config.expert_hidden_dim]),
                        w2: init_matrix(&mut rng, config.expert_hidden_dim, e),
                        b2: Tensor::zeros(vec![e]),
                    })
                    .collect(),
            })
            .collect();
        let final_norm = LayerNorm::new(e);
        let projector = ConceptProjector {
            heads: config
                .concept_arities
                .iter()
                .map(|&arity| ConceptHead {
                    w: init_matrix(&mut rng, e, arity),
                    b: Tensor::zeros(vec![arity]),
                })
                .collect(),
        };
        let head = TaskHead {
            w: init_matrix(&mut rng, config.concept_dim(), config.task_kind.output_dim()),
            b: Tensor::zeros(vec![config.task_kind.output_dim()]),
        };
        Ok(Model {
            config,
            token_embedding,
            position_embedding,
            attention_layers,
            moce_layers,
            final_norm,
            projector,
            head,
        })
    }

    /// Walk every parameter in a fixed order with its checkpoint key.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("token_embedding".into(), &self.token_embedding);
        f("position_embedding".into(), &self.position_embedding);
        for (i, a) in self.attention_layers.iter().enumerate() {
            visit_attention(&format!("attn.{i}"), a, f);
        }
        for (i, layer) in self.moce_layers.iter().enumerate() {
            let p = format!("moce.{i}");
            visit_attention(&format!("{p}.attn"), &layer.attn, f);
            f(format!("{p}.ln2.gamma"), &layer.norm2.gamma);
            f(format!("{p}.ln2.beta"), &layer.norm2.beta);
            for (k, r) in layer.routers.iter().enumerate() {
                f(format!("{p}.router.{k}.w1"), &r.w1);
                f(format!("{p}.router.{k}.b1"), &r.b1);
                f(format!("{p}.router.{k}.w2"), &r.w2);
                f(format!("{p}.router.{k}.b2"), &r.b2);
            }
            for (m, ex) in layer.experts.iter().enumerate() {
                f(format!("{p}.expert.{m}.w1"), &ex.w1);
                f(format!("{p}.expert.{m}.b1"), &ex.b1);
                f(format!("{p}.expert.{m}.w2"), &ex.w2);
                f(format!("{p}.expert.{m}.b2"), &ex.b2);
            }
        }
        f("final_norm.gamma".into(), &self.final_norm.gamma);
        f("final_norm.beta".into(), &self.final_norm.beta);
        for (k, h) in self.projector.heads.iter().enumerate() {
            f(format!("projector.{k}.w"), &h.w);
            f(format!("projector.{k}.b"), &h.b);
        }
        f("head.w".into(), &self.head.w);
        f("head.b".into(), &self.head.b);
    }

    /// Mutable traversal in the same order as `visit_params`.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.token_embedding);
        f(&mut self.position_embedding);
        for a in &mut self.attention_layers {
            visit_attention_mut(a, f);
        }
        for layer in &mut self.moce_layers {
            visit_attention_mut(&mut layer.attn, f);
            f(&mut layer.norm2.gamma);
            f(&mut layer.norm2.beta);
            for r in &mut layer.routers {
                f(&mut r.w1);
                f(&mut r.b1);
                f(&mut r.w2);
                f(&mut r.b2);
            }
            for ex in &mut layer.experts {
                f(&mut ex.w1);
                f(&mut ex.b1);
                f(&mut ex.w2);
                f(&mut ex.b2);
            }
        }
        f(&mut self.final_norm.gamma);
        f(&mut self.final_norm.beta);
        for h in &mut self.projector.heads {
            f(&mut h.w);
            f(&mut h.b);
        }
        f(&mut self.head.w);
        f(&mut self.head.b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    /// Flatten all parameters in visit order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrite all parameters from a flat vector in visit order.
    pub fn unflatten_params(&mut self, flat: &[f64]) -> crate::error::Result<()> {
        if flat.len() != self.param_count() {
            return Err(crate::error::Error::shape(format!(
                "expected {} parameter values, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }
}

fn visit_attention<'a>(prefix: &str, a: &'a AttentionBlock, f: &mut dyn FnMut(String, &'a Tensor)) {
    f(format!("{prefix}.ln.gamma"), &a.norm.gamma);
    f(format!("{prefix}.ln.beta"), &a.norm.beta);
    f(format!("{prefix}.wq"), &a.wq);
    f(format!("{prefix}.bq"), &a.bq);
    f(format!("{prefix}.wk"), &a.wk);
    f(format!("{prefix}.wv"), &a.wv);
    f(format!("{prefix}.bv"), &a.bv);
    f(format!("{prefix}.wo"), &a.wo);
    f(format!("{prefix}.bo"), &a.bo);
}

fn visit_attention_mut(a: &mut AttentionBlock, f: &mut dyn FnMut(&mut Tensor)) {
    f(&mut a.norm.gamma);
    f(&mut a.norm.beta);
    f(&mut a.wq);
    f(&mut a.bq);
    f(&mut a.wk);
    f(&mut a.wv);
    f(&mut a.bv);
    f(&mut a.wo);
    f(&mut a.bo);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, TaskKind};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            max_seq_len: 6,
            embed_dim: 8,
            num_heads: 2,
            num_attention_layers: 1,
            num_moce_layers: 2,
            num_experts: 4,
            experts_active: 1,
            experts_intervention: 3,
            concept_arities: vec![3, 2],
            task_kind: TaskKind::Classification { classes: 3 },
            router_hidden_dim: 4,
            expert_hidden_dim: 6,
            renormalize_gates: false,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::new(cfg(), 7).unwrap();
        let b = Model::new(cfg(), 7).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());
        let c = Model::new(cfg(), 8).unwrap();
        assert_ne!(a.flatten_params(), c.flatten_params());
    }

    #[test]
    fn visit_orders_agree() {
        let mut m = Model::new(cfg(), 1).unwrap();
        let flat = m.flatten_params();
        let mut restored = flat.clone();
        for v in &mut restored {
            *v += 1.0;
        }
        m.unflatten_params(&restored).unwrap();
        let back = m.flatten_params();
        for (a, b) in flat.iter().zip(&back) {
            assert_eq!(a + 1.0, *b);
        }
    }

    #[test]
    fn param_names_are_unique() {
        let m = Model::new(cfg(), 1).unwrap();
        let mut names = Vec::new();
        m.visit_params(&mut |name, _| names.push(name));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }
}
