//! Tuning-free correction: re-run suspect predictions with a larger expert
//! budget. Parameters are never touched; only the router's top-T cut widens.

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::metacognition::entropy::ScrutinyStatistic;
use crate::metacognition::scrutiny::{fit_thresholds, flag, ScrutinyReport};
use crate::model::checkpoint::content_hash;
use crate::model::{BudgetPlan, ForwardTrace, Model};
use crate::training::{infer_examples, metrics_from_traces, Metrics, TaskMetric};

/// Intervention variants (the ablation axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    /// No intervention.
    Null,
    /// Flag by entropy scrutiny, re-run flagged concepts at T'.
    Metacognitive,
    /// Flags replaced by ground-truth error indicators (upper bound).
    Oracle,
    /// Every concept of every example re-run with all experts active.
    Max,
}

impl std::str::FromStr for InterventionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" => Ok(InterventionMode::Null),
            "metacog" | "metacognitive" => Ok(InterventionMode::Metacognitive),
            "oracle" => Ok(InterventionMode::Oracle),
            "max" => Ok(InterventionMode::Max),
            other => Err(Error::config(format!("unknown intervention mode '{other}'"))),
        }
    }
}

/// Whether the enlarged budget applies at every expert layer or only the last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionScope {
    AllLayers,
    FinalLayerOnly,
}

/// Full policy: mode, budgets, scope, and the clustered statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionPolicy {
    pub mode: InterventionMode,
    /// Normal budget T.
    pub t: usize,
    /// Enlarged budget T'.
    pub t_prime: usize,
    pub scope: InterventionScope,
    pub statistic: ScrutinyStatistic,
}

impl InterventionPolicy {
    pub fn from_model(model: &Model, mode: InterventionMode) -> InterventionPolicy {
        InterventionPolicy {
            mode,
            t: model.config.experts_active,
            t_prime: model.config.experts_intervention,
            scope: InterventionScope::AllLayers,
            statistic: ScrutinyStatistic::Entropy,
        }
    }

    pub fn validate(&self, num_experts: usize) -> Result<()> {
        if self.mode != InterventionMode::Null {
            if self.t < 1 || self.t_prime <= self.t || self.t_prime > num_experts {
                return Err(Error::config(format!(
                    "intervention budgets must satisfy 1 <= T ({}) < T' ({}) <= M ({})",
                    self.t, self.t_prime, num_experts
                )));
            }
        }
        Ok(())
    }
}

/// Flags per `[example][concept]` from ground-truth labels: an oracle flag
/// marks exactly the concepts whose argmax prediction is wrong.
pub fn oracle_flags(trace: &ForwardTrace, truth: Option<&[Vec<usize>]>) -> Result<Vec<Vec<bool>>> {
    let truth = truth.ok_or_else(|| {
        Error::contract("oracle intervention requires ground-truth concept labels")
    })?;
    if truth.len() != trace.examples.len() {
        return Err(Error::contract(format!(
            "oracle labels cover {} examples, trace has {}",
            truth.len(),
            trace.examples.len()
        )));
    }
    Ok(trace
        .examples
        .iter()
        .zip(truth)
        .map(|(ex, labels)| {
            ex.concept_predictions()
                .iter()
                .zip(labels)
                .map(|(p, t)| p != t)
                .collect()
        })
        .collect())
}

/// Re-run flagged examples with per-concept budgets raised to T'.
///
/// Unflagged examples keep their original trace untouched (bit-identical)
/// and parameters are never modified in any mode.
pub fn intervene(
    model: &Model,
    examples: &[Example],
    pre_trace: &ForwardTrace,
    flags: &[Vec<bool>],
    policy: &InterventionPolicy,
) -> Result<ForwardTrace> {
    policy.validate(model.config.num_experts)?;
    if examples.len() != pre_trace.examples.len() || examples.len() != flags.len() {
        return Err(Error::contract("examples, trace, and flags must align"));
    }
    let mut out = Vec::with_capacity(examples.len());
    for ((ex, pre), flag_row) in examples.iter().zip(&pre_trace.examples).zip(flags) {
        if flag_row.iter().any(|&f| f) {
            let budgets: Vec<usize> = flag_row
                .iter()
                .map(|&f| if f { policy.t_prime } else { policy.t })
                .collect();
            let plan = match policy.scope {
                InterventionScope::AllLayers => BudgetPlan::per_concept(&model.config, &budgets)?,
                InterventionScope::FinalLayerOnly => {
                    BudgetPlan::final_layer_only(&model.config, policy.t, &budgets)?
                }
            };
            out.push(crate::model::run_single(
                model,
                ex.id,
                &ex.tokens,
                &plan,
                true,
            )?);
        } else {
            out.push(pre.clone());
        }
    }
    Ok(ForwardTrace { examples: out })
}

/// Metrics before and after an intervention pass over one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub mode: InterventionMode,
    pub pre: Metrics,
    pub post: Metrics,
    /// Post minus pre concept macro-F1 (positive = better).
    pub concept_improvement: f64,
    /// Task improvement, sign-adjusted so positive is better for both
    /// classification (F1 up) and regression (RMSE down).
    pub task_improvement: f64,
    /// Present in metacognitive mode.
    pub scrutiny: Option<ScrutinyReport>,
    /// Flags used, per `[example][concept]` (empty for null).
    pub flags: Vec<Vec<bool>>,
}

fn task_improvement(pre: &TaskMetric, post: &TaskMetric) -> f64 {
    match (pre, post) {
        (TaskMetric::MacroF1(a), TaskMetric::MacroF1(b)) => b - a,
        (TaskMetric::Rmse(a), TaskMetric::Rmse(b)) => a - b,
        _ => f64::NAN,
    }
}

/// Evaluate a split under an intervention policy.
///
/// Thresholds are fitted once on `fit_split` (the dev split) and frozen;
/// `eval_split` is flagged against them. Returns pre/post metrics plus the
/// scrutiny report. The model's checkpoint hash is verified unchanged.
pub fn evaluate_with_intervention(
    model: &Model,
    fit_split: &[Example],
    eval_split: &[Example],
    policy: &InterventionPolicy,
) -> Result<InterventionOutcome> {
    policy.validate(model.config.num_experts)?;
    if eval_split.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let hash_before = content_hash(model)?;

    let base_plan = BudgetPlan::uniform(&model.config, policy.t)?;
    let pre_trace = infer_examples(model, eval_split, &base_plan, true)?;
    let pre = metrics_from_traces(&pre_trace, eval_split, &model.config.task_kind)?;

    let num_concepts = model.config.num_concepts();
    let (post_trace, scrutiny, flags) = match policy.mode {
        InterventionMode::Null => (pre_trace.clone(), None, Vec::new()),
        InterventionMode::Max => {
            let flags = vec![vec![true; num_concepts]; eval_split.len()];
            let max_policy = InterventionPolicy {
                t_prime: model.config.num_experts,
                // keep T < T' for validation when T = M is configured
                t: policy.t.min(model.config.num_experts - 1),
                ..*policy
            };
            let post = intervene(model, eval_split, &pre_trace, &flags, &max_policy)?;
            (post, None, flags)
        }
        InterventionMode::Oracle => {
            let truth: Vec<Vec<usize>> = eval_split.iter().map(|e| e.concepts.clone()).collect();
            let flags = oracle_flags(&pre_trace, Some(&truth))?;
            let post = intervene(model, eval_split, &pre_trace, &flags, policy)?;
            (post, None, flags)
        }
        InterventionMode::Metacognitive => {
            if fit_split.is_empty() {
                return Err(Error::contract(
                    "metacognitive intervention needs a threshold-fitting split",
                ));
            }
            let fit_trace = infer_examples(model, fit_split, &base_plan, true)?;
            let thresholds = fit_thresholds(&fit_trace, policy.statistic)?;
            let report = flag(&pre_trace, &thresholds)?;
            let flags = report.flag_matrix(eval_split.len(), num_concepts);
            let post = intervene(model, eval_split, &pre_trace, &flags, policy)?;
            (post, Some(report), flags)
        }
    };

    let post = metrics_from_traces(&post_trace, eval_split, &model.config.task_kind)?;
    let hash_after = content_hash(model)?;
    if hash_before != hash_after {
        return Err(Error::Numeric(
            "intervention mutated model parameters".into(),
        ));
    }
    Ok(InterventionOutcome {
        mode: policy.mode,
        concept_improvement: post.concept_macro_f1 - pre.concept_macro_f1,
        task_improvement: task_improvement(&pre.task, &post.task),
        pre,
        post,
        scrutiny,
        flags,
    })
}
