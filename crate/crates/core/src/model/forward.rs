//! Forward pass: embedding, attention stack, per-concept expert routing,
//! concept bottleneck, and the linear task head.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{AttentionBlock, Model, Router};
use crate::model::trace::{ExampleTrace, ForwardTrace, GateRecord};
use crate::numerics::{Tape, ValueId};

// ── parameter binding ────────────────────────────────────────────────

pub struct AttentionIds {
    norm_gamma: ValueId,
    norm_beta: ValueId,
    wq: ValueId,
    bq: ValueId,
    wk: ValueId,
    wv: ValueId,
    bv: ValueId,
    wo: ValueId,
    bo: ValueId,
}

pub struct RouterIds {
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
}

pub struct ExpertIds {
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
}

pub struct MoceLayerIds {
    attn: AttentionIds,
    ln2_gamma: ValueId,
    ln2_beta: ValueId,
    routers: Vec<RouterIds>,
    experts: Vec<ExpertIds>,
}

/// Tape handles for every model parameter, in `visit_params` order.
pub struct ModelIds {
    token_embedding: ValueId,
    position_embedding: ValueId,
    attention: Vec<AttentionIds>,
    moce: Vec<MoceLayerIds>,
    final_gamma: ValueId,
    final_beta: ValueId,
    projector: Vec<(ValueId, ValueId)>,
    head_w: ValueId,
    head_b: ValueId,
    /// Flat registration order, matching `Model::visit_params`.
    ordered: Vec<ValueId>,
}

impl ModelIds {
    pub fn ordered(&self) -> &[ValueId] {
        &self.ordered
    }

    pub fn head_w(&self) -> ValueId {
        self.head_w
    }

    pub fn head_b(&self) -> ValueId {
        self.head_b
    }
}

fn bind_attention(tape: &mut Tape, a: &AttentionBlock, ordered: &mut Vec<ValueId>) -> AttentionIds {
    let mut reg = |t| {
        let id = tape.param(t);
        ordered.push(id);
        id
    };
    AttentionIds {
        norm_gamma: reg(&a.norm.gamma),
        norm_beta: reg(&a.norm.beta),
        wq: reg(&a.wq),
        bq: reg(&a.bq),
        wk: reg(&a.wk),
        wv: reg(&a.wv),
        bv: reg(&a.bv),
        wo: reg(&a.wo),
        bo: reg(&a.bo),
    }
}

/// Register every parameter of `model` on `tape`.
///
/// Registration order matches `Model::visit_params`, which is what lets the
/// trainer zip gradients back onto the parameter tree.
pub fn bind(tape: &mut Tape, model: &Model) -> ModelIds {
    let mut ordered = Vec::new();
    let token_embedding = tape.param(&model.token_embedding);
    ordered.push(token_embedding);
    let position_embedding = tape.param(&model.position_embedding);
    ordered.push(position_embedding);
    let attention = model
        .attention_layers
        .iter()
        .map(|a| bind_attention(tape, a, &mut ordered))
        .collect();
    let moce = model
        .moce_layers
        .iter()
        .map(|layer| {
            let attn = bind_attention(tape, &layer.attn, &mut ordered);
            let mut reg = |t| {
                let id = tape.param(t);
                ordered.push(id);
                id
            };
            let ln2_gamma = reg(&layer.norm2.gamma);
            let ln2_beta = reg(&layer.norm2.beta);
            let routers = layer
                .routers
                .iter()
                .map(|r| RouterIds {
                    w1: reg(&r.w1),
                    b1: reg(&r.b1),
                    w2: reg(&r.w2),
                    b2: reg(&r.b2),
                })
                .collect();
            let experts = layer
                .experts
                .iter()
                .map(|e| ExpertIds {
                    w1: reg(&e.w1),
                    b1: reg(&e.b1),
                    w2: reg(&e.w2),
                    b2: reg(&e.b2),
                })
                .collect();
            MoceLayerIds {
                attn,
                ln2_gamma,
                ln2_beta,
                routers,
                experts,
            }
        })
        .collect();
    let mut reg = |t| {
        let id = tape.param(t);
        ordered.push(id);
        id
    };
    let final_gamma = reg(&model.final_norm.gamma);
    let final_beta = reg(&model.final_norm.beta);
    let projector = model
        .projector
        .heads
        .iter()
        .map(|h| (reg(&h.w), reg(&h.b)))
        .collect();
    let head_w = reg(&model.head.w);
    let head_b = reg(&model.head.b);
    ModelIds {
        token_embedding,
        position_embedding,
        attention,
        moce,
        final_gamma,
        final_beta,
        projector,
        head_w,
        head_b,
        ordered,
    }
}

// ── budget plans ─────────────────────────────────────────────────────

/// Per-layer, per-concept expert budgets for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetPlan {
    /// `per_layer[layer][concept]` expert budget.
    pub per_layer: Vec<Vec<usize>>,
}

impl BudgetPlan {
    /// The same budget for every concept at every layer.
    pub fn uniform(config: &ModelConfig, budget: usize) -> Result<Self> {
        BudgetPlan::per_concept(config, &vec![budget; config.num_concepts()])
    }

    /// Per-concept budgets applied at every expert layer.
    pub fn per_concept(config: &ModelConfig, budgets: &[usize]) -> Result<Self> {
        if budgets.len() != config.num_concepts() {
            return Err(Error::config(format!(
                "budget plan has {} entries for {} concepts",
                budgets.len(),
                config.num_concepts()
            )));
        }
        for &b in budgets {
            if b < 1 || b > config.num_experts {
                return Err(Error::config(format!(
                    "expert budget {} outside [1, {}]",
                    b, config.num_experts
                )));
            }
        }
        Ok(BudgetPlan {
            per_layer: vec![budgets.to_vec(); config.num_moce_layers],
        })
    }

    /// Keep the base budget everywhere except the final expert layer.
    pub fn final_layer_only(config: &ModelConfig, base: usize, budgets: &[usize]) -> Result<Self> {
        let mut plan = BudgetPlan::per_concept(config, budgets)?;
        let base_row = BudgetPlan::uniform(config, base)?.per_layer[0].clone();
        let last = plan.per_layer.len() - 1;
        for (i, row) in plan.per_layer.iter_mut().enumerate() {
            if i != last {
                *row = base_row.clone();
            }
        }
        Ok(plan)
    }

    /// Budgets at the final expert layer (what the trace reports as active).
    pub fn final_budgets(&self) -> &[usize] {
        self.per_layer.last().expect("plan has at least one layer")
    }
}

// ── forward pass ─────────────────────────────────────────────────────

/// Tape handles produced by one example's forward pass.
pub struct ExampleForward {
    pub concept_logits: Vec<ValueId>,
    pub concept_probs: Vec<ValueId>,
    pub task_logits: ValueId,
    /// Full router softmax per `[layer][concept]`, for the balancing loss.
    pub router_probs: Vec<Vec<ValueId>>,
    /// Gate records per `[layer][concept]`; empty unless requested.
    pub gates: Vec<Vec<GateRecord>>,
}

fn attention_forward(
    tape: &mut Tape,
    ids: &AttentionIds,
    x: ValueId,
    num_heads: usize,
) -> Result<ValueId> {
    let e = tape.shape(x)[1];
    let dh = e / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let n = tape.layer_norm(x, ids.norm_gamma, ids.norm_beta)?;
    let q = tape.matmul(n, ids.wq)?;
    let q = tape.add_bias(q, ids.bq)?;
    let k = tape.matmul(n, ids.wk)?;
    let v = tape.matmul(n, ids.wv)?;
    let v = tape.add_bias(v, ids.bv)?;

    let mut contexts = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        contexts.push(tape.matmul(weights, vh)?);
    }
    let ctx = tape.concat_cols(&contexts)?;
    let o = tape.matmul(ctx, ids.wo)?;
    let o = tape.add_bias(o, ids.bo)?;
    tape.add(x, o)
}

fn expert_forward(tape: &mut Tape, ids: &ExpertIds, u: ValueId) -> Result<ValueId> {
    let h = tape.matmul(u, ids.w1)?;
    let h = tape.add_bias(h, ids.b1)?;
    let h = tape.tanh(h)?;
    let y = tape.matmul(h, ids.w2)?;
    tape.add_bias(y, ids.b2)
}

fn router_logits(tape: &mut Tape, ids: &RouterIds, pooled: ValueId) -> Result<ValueId> {
    let h = tape.matmul(pooled, ids.w1)?;
    let h = tape.add_bias(h, ids.b1)?;
    let h = tape.tanh(h)?;
    let logits = tape.matmul(h, ids.w2)?;
    tape.add_bias(logits, ids.b2)
}

struct MoceOutput {
    x: ValueId,
    probs: Vec<ValueId>,
    gates: Vec<GateRecord>,
}

fn moce_forward(
    tape: &mut Tape,
    ids: &MoceLayerIds,
    config: &ModelConfig,
    x: ValueId,
    budgets: &[usize],
    record_gates: bool,
) -> Result<MoceOutput> {
    let h = attention_forward(tape, &ids.attn, x, config.num_heads)?;
    let u = tape.layer_norm(h, ids.ln2_gamma, ids.ln2_beta)?;
    let pooled = tape.mean_rows(u)?;

    let mut probs_out = Vec::with_capacity(ids.routers.len());
    let mut records = Vec::new();
    let mut union: BTreeSet<usize> = BTreeSet::new();
    let mut total: Option<ValueId> = None;
    for (k, router) in ids.routers.iter().enumerate() {
        let logits = router_logits(tape, router, pooled)?;
        let probs = tape.softmax_rows(logits)?;
        let (mut gates, kept) = tape.top_t_mask(probs, budgets[k])?;
        if config.renormalize_gates {
            gates = tape.renormalize_kept(gates, &kept)?;
        }
        if record_gates {
            let gate_values = tape.value(gates);
            records.push(GateRecord {
                router_logits: tape.value(logits).to_vec(),
                selected: kept.iter().map(|&i| (i, gate_values[i])).collect(),
            });
        }
        union.extend(kept.iter().copied());
        probs_out.push(probs);
        total = Some(match total {
            Some(t) => tape.add(t, gates)?,
            None => gates,
        });
    }
    let total = total.expect("config guarantees at least one concept");

    // Expert outputs are shared across concepts, so each selected expert
    // runs once with the summed gate coefficient.
    let mut acc: Option<ValueId> = None;
    for &m in &union {
        let y = expert_forward(tape, &ids.experts[m], u)?;
        let contrib = tape.scale_by_element(y, total, m)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, contrib)?,
            None => contrib,
        });
    }
    let mixture = acc.expect("budgets guarantee at least one expert");
    let out = tape.add(h, mixture)?;
    Ok(MoceOutput {
        x: out,
        probs: probs_out,
        gates: records,
    })
}

/// Run one example through the full pipeline.
pub fn forward_example(
    tape: &mut Tape,
    ids: &ModelIds,
    config: &ModelConfig,
    tokens: &[usize],
    plan: &BudgetPlan,
    record_gates: bool,
) -> Result<ExampleForward> {
    if tokens.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::shape(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index(format!(
            "unknown token id {} (vocab size {})",
            bad, config.vocab_size
        )));
    }
    if plan.per_layer.len() != config.num_moce_layers {
        return Err(Error::config(format!(
            "budget plan covers {} layers, model has {}",
            plan.per_layer.len(),
            config.num_moce_layers
        )));
    }

    let emb = tape.embed(ids.token_embedding, tokens)?;
    let pos = tape.slice_rows(ids.position_embedding, 0, tokens.len())?;
    let mut x = tape.add(emb, pos)?;

    for attn in &ids.attention {
        x = attention_forward(tape, attn, x, config.num_heads)?;
    }

    let mut router_probs = Vec::with_capacity(ids.moce.len());
    let mut gates = Vec::with_capacity(ids.moce.len());
    for (li, layer) in ids.moce.iter().enumerate() {
        let out = moce_forward(tape, layer, config, x, &plan.per_layer[li], record_gates)?;
        x = out.x;
        router_probs.push(out.probs);
        if record_gates {
            gates.push(out.gates);
        }
    }

    let h = tape.layer_norm(x, ids.final_gamma, ids.final_beta)?;
    let z = tape.mean_rows(h)?;

    let mut concept_logits = Vec::with_capacity(ids.projector.len());
    let mut concept_probs = Vec::with_capacity(ids.projector.len());
    for &(w, b) in &ids.projector {
        let logits = tape.matmul(z, w)?;
        let logits = tape.add_bias(logits, b)?;
        concept_logits.push(logits);
        concept_probs.push(tape.softmax_rows(logits)?);
    }

    let concat = tape.concat_cols(&concept_probs)?;
    let task = tape.matmul(concat, ids.head_w)?;
    let task_logits = tape.add_bias(task, ids.head_b)?;

    Ok(ExampleForward {
        concept_logits,
        concept_probs,
        task_logits,
        router_probs,
        gates,
    })
}

impl ExampleForward {
    /// Materialize the trace values out of the tape arena.
    pub fn into_trace(
        self,
        tape: &Tape,
        example_id: usize,
        tokens: &[usize],
        plan: &BudgetPlan,
    ) -> ExampleTrace {
        ExampleTrace {
            example_id,
            tokens: tokens.to_vec(),
            active_budgets: plan.final_budgets().to_vec(),
            layers: self.gates,
            concept_logits: self
                .concept_logits
                .iter()
                .map(|&id| tape.value(id).to_vec())
                .collect(),
            concept_probs: self
                .concept_probs
                .iter()
                .map(|&id| tape.value(id).to_vec())
                .collect(),
            task_logits: tape.value(self.task_logits).to_vec(),
        }
    }
}

/// Inference over a set of examples, one fresh tape per example.
pub fn run_inference(
    model: &Model,
    token_seqs: &[(usize, Vec<usize>)],
    plan: &BudgetPlan,
    record_gates: bool,
) -> Result<ForwardTrace> {
    let mut examples = Vec::with_capacity(token_seqs.len());
    for (id, tokens) in token_seqs {
        examples.push(run_single(model, *id, tokens, plan, record_gates)?);
    }
    Ok(ForwardTrace { examples })
}

/// Inference for one example.
pub fn run_single(
    model: &Model,
    example_id: usize,
    tokens: &[usize],
    plan: &BudgetPlan,
    record_gates: bool,
) -> Result<ExampleTrace> {
    let mut tape = Tape::inference();
    let ids = bind(&mut tape, model);
    let fwd = forward_example(&mut tape, &ids, &model.config, tokens, plan, record_gates)?;
    Ok(fwd.into_trace(&tape, example_id, tokens, plan))
}

/// Re-run only the linear task head over stored concept probabilities.
///
/// Uses the same tape ops as the live pass, so given the probabilities out
/// of a trace it reproduces the stored task logits bit-exactly.
pub fn head_predict(head: &crate::model::params::TaskHead, concept_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let head_w = tape.param(&head.w);
    let head_b = tape.param(&head.b);
    let prob_ids: Vec<ValueId> = concept_probs
        .iter()
        .map(|p| tape.constant(&crate::numerics::Tensor::row(p.clone())))
        .collect();
    let concat = tape.concat_cols(&prob_ids)?;
    let task = tape.matmul(concat, head_w)?;
    let task = tape.add_bias(task, head_b)?;
    Ok(tape.value(task).to_vec())
}

/// `head_predict` checked against the model's concept layout.
pub fn task_predict(model: &Model, concept_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if concept_probs.len() != model.config.num_concepts() {
        return Err(Error::contract(format!(
            "expected {} concept probability vectors, got {}",
            model.config.num_concepts(),
            concept_probs.len()
        )));
    }
    head_predict(&model.head, concept_probs)
}

/// Gate vector for one concept given pooled features, outside any model run.
///
/// Softmax over the router's logits, then all but the top `budget` entries
/// zeroed (no renormalization). Exposed for tests and diagnostics.
pub fn route(router: &Router, pooled: &[f64], budget: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut tape = Tape::inference();
    let w1 = tape.constant(&router.w1);
    let b1 = tape.constant(&router.b1);
    let w2 = tape.constant(&router.w2);
    let b2 = tape.constant(&router.b2);
    let pooled = tape.constant(&crate::numerics::Tensor::row(pooled.to_vec()));
    let ids = RouterIds { w1, b1, w2, b2 };
    let logits = router_logits(&mut tape, &ids, pooled)?;
    let probs = tape.softmax_rows(logits)?;
    let (gates, kept) = tape.top_t_mask(probs, budget)?;
    Ok((tape.value(gates).to_vec(), kept))
}
