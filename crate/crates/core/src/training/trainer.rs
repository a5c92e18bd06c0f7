//! Minibatch training with per-epoch dev evaluation, early stopping, and the
//! expert-budget rehearsal ramp.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Example};
use crate::error::{Error, Result};
use crate::model::{
    bind, forward_example, BudgetPlan, ForwardTrace, Model, TaskKind,
};
use crate::numerics::{Tape, Tensor, ValueId};
use crate::training::loss::{joint_loss, real_labels};
use crate::training::metrics::{metrics_from_traces, Metrics, TaskMetric};
use crate::training::optimizer::{Optimizer, OptimizerKind};
use crate::training::schedule::pseudo_intervention_budget;

/// How the three parameter groups are supervised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Task loss only; concept labels ignored.
    Vanilla,
    /// Encoder+projector on concepts, head on ground-truth concept vectors.
    Independent,
    /// Concept phase first, then the head on frozen projector outputs.
    Sequential,
    /// Weighted sum of task and concept losses, one backward pass.
    Joint,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "independent" => Ok(Strategy::Independent),
            "sequential" => Ok(Strategy::Sequential),
            "joint" => Ok(Strategy::Joint),
            other => Err(Error::config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// What the task head consumed during training; recorded for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInputSource {
    /// Live projector probabilities (gradients flow through the encoder).
    ProjectorProbs,
    /// Ground-truth one-hot concept vectors.
    GroundTruthOneHot,
    /// Projector probabilities with the encoder frozen.
    FrozenProjectorProbs,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Concept-loss weight in the joint objective.
    pub gamma: f64,
    /// Weight of the expert-importance balancing loss.
    pub balance_coefficient: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving dev epochs tolerated before stopping.
    pub patience: usize,
    /// Ramp the training-time expert budget from T to T' in the second half.
    pub pseudo_intervention: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Joint,
            gamma: 5.0,
            balance_coefficient: 0.01,
            learning_rate: 3e-4,
            batch_size: 8,
            max_epochs: 30,
            patience: 5,
            pseudo_intervention: true,
            optimizer: OptimizerKind::RmsNorm,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.balance_coefficient < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

/// One epoch's numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    /// Training-time expert budget this epoch.
    pub budget: usize,
    /// Mean optimized batch loss (includes the balance term).
    pub train_loss: f64,
    /// Dev joint loss (task + gamma * concepts, no balance).
    pub dev_loss: f64,
    pub dev_task_metric: TaskMetric,
    pub dev_concept_macro_f1: f64,
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: Strategy,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (within the final phase) whose checkpoint was kept.
    pub selected_epoch: usize,
    pub head_input_source: HeadInputSource,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Per-epoch CSV rows; stable field order, no timestamps.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "phase,epoch,budget,train_loss,dev_loss,dev_task_metric,dev_concept_macro_f1\n",
        );
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.phase,
                r.epoch,
                r.budget,
                r.train_loss,
                r.dev_loss,
                r.dev_task_metric.value(),
                r.dev_concept_macro_f1
            ));
        }
        out
    }
}

/// Run inference over examples at the given plan.
pub fn infer_examples(
    model: &Model,
    examples: &[Example],
    plan: &BudgetPlan,
    record_gates: bool,
) -> Result<ForwardTrace> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.tokens.is_empty() {
            return Err(Error::contract(format!(
                "example {} is not tokenized",
                ex.id
            )));
        }
        out.push(crate::model::run_single(
            model,
            ex.id,
            &ex.tokens,
            plan,
            record_gates,
        )?);
    }
    Ok(ForwardTrace { examples: out })
}

/// Plain evaluation at the model's normal budget, no intervention.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::contract("evaluate: empty split"));
    }
    let plan = BudgetPlan::uniform(&model.config, model.config.experts_active)?;
    let trace = infer_examples(model, examples, &plan, false)?;
    metrics_from_traces(&trace, examples, &model.config.task_kind)
}

#[derive(Clone, Copy, PartialEq)]
enum Objective {
    Joint,
    Vanilla,
    Independent,
    ConceptOnly,
    HeadOnly,
}

impl Objective {
    fn head_source(self) -> HeadInputSource {
        match self {
            Objective::Independent => HeadInputSource::GroundTruthOneHot,
            Objective::HeadOnly => HeadInputSource::FrozenProjectorProbs,
            _ => HeadInputSource::ProjectorProbs,
        }
    }

    fn uses_balance(self) -> bool {
        !matches!(self, Objective::HeadOnly)
    }

    fn selects_on_concepts(self) -> bool {
        matches!(self, Objective::ConceptOnly)
    }
}

fn one_hot_concat(config_arities: &[usize], concepts: &[usize]) -> Tensor {
    let total: usize = config_arities.iter().sum();
    let mut data = vec![0.0; total];
    let mut offset = 0;
    for (&arity, &value) in config_arities.iter().zip(concepts) {
        data[offset + value] = 1.0;
        offset += arity;
    }
    Tensor::row(data)
}

struct StepResult {
    total: f64,
    grads: Vec<Vec<f64>>,
}

fn train_step(
    model: &Model,
    batch: &[&Example],
    budget: usize,
    config: &TrainConfig,
    objective: Objective,
) -> Result<StepResult> {
    let mut tape = Tape::recording();
    let ids = bind(&mut tape, model);
    let plan = BudgetPlan::uniform(&model.config, budget)?;
    let b = batch.len();
    let bw = 1.0 / b as f64;
    let num_concepts = model.config.num_concepts();
    let num_layers = model.config.num_moce_layers;

    let mut task_ces: Vec<ValueId> = Vec::new();
    let mut regression_preds: Vec<ValueId> = Vec::new();
    let mut concept_ces: Vec<Vec<ValueId>> = vec![Vec::new(); num_concepts];
    let mut router_prob_sums: Vec<Vec<Option<ValueId>>> = vec![vec![None; num_concepts]; num_layers];

    let use_live_task = matches!(
        objective,
        Objective::Joint | Objective::Vanilla | Objective::HeadOnly
    );
    let use_concepts = matches!(
        objective,
        Objective::Joint | Objective::Independent | Objective::ConceptOnly
    );

    for ex in batch {
        let fwd = forward_example(&mut tape, &ids, &model.config, &ex.tokens, &plan, false)?;

        if use_live_task {
            let logits = if objective == Objective::HeadOnly {
                // frozen encoder: rebuild the head over detached probabilities
                let detached: Vec<ValueId> =
                    fwd.concept_probs.iter().map(|&p| tape.detach(p)).collect();
                let concat = tape.concat_cols(&detached)?;
                let t = tape.matmul(concat, ids.head_w())?;
                tape.add_bias(t, ids.head_b())?
            } else {
                fwd.task_logits
            };
            match &model.config.task_kind {
                TaskKind::Classification { .. } => {
                    let y = ex.label.class()?;
                    task_ces.push(tape.cross_entropy_mean(logits, &[y])?);
                }
                TaskKind::Regression => regression_preds.push(logits),
            }
        }
        if objective == Objective::Independent {
            let onehot = one_hot_concat(&model.config.concept_arities, &ex.concepts);
            let constant = tape.constant(&onehot);
            let t = tape.matmul(constant, ids.head_w())?;
            let logits = tape.add_bias(t, ids.head_b())?;
            match &model.config.task_kind {
                TaskKind::Classification { .. } => {
                    let y = ex.label.class()?;
                    task_ces.push(tape.cross_entropy_mean(logits, &[y])?);
                }
                TaskKind::Regression => regression_preds.push(logits),
            }
        }
        if use_concepts {
            for (k, &cl) in fwd.concept_logits.iter().enumerate() {
                concept_ces[k].push(tape.cross_entropy_mean(cl, &[ex.concepts[k]])?);
            }
        }
        for (layer, probs) in fwd.router_probs.iter().enumerate() {
            for (k, &p) in probs.iter().enumerate() {
                router_prob_sums[layer][k] = Some(match router_prob_sums[layer][k] {
                    Some(acc) => tape.add(acc, p)?,
                    None => p,
                });
            }
        }
    }

    let mut terms: Vec<(ValueId, f64)> = Vec::new();
    if !task_ces.is_empty() {
        for &t in &task_ces {
            terms.push((t, bw));
        }
    }
    if !regression_preds.is_empty() {
        let labels = real_labels(batch.iter().copied())?;
        let preds = tape.concat_cols(&regression_preds)?;
        let loss = tape.rmse(preds, &labels)?;
        terms.push((loss, 1.0));
    }
    if use_concepts {
        // weight: vanilla never reaches here; concept-only trains at weight 1
        let w = match objective {
            Objective::Joint => config.gamma,
            _ => 1.0,
        };
        for ces in &concept_ces {
            for &c in ces {
                terms.push((c, w * bw));
            }
        }
    }
    if objective.uses_balance() && config.balance_coefficient > 0.0 {
        for layer in &router_prob_sums {
            for sum in layer.iter().flatten() {
                let cv = tape.cv_squared(*sum)?;
                terms.push((cv, config.balance_coefficient));
            }
        }
    }

    let total_id = tape.add_scalars(&terms)?;
    let total = tape.scalar_value(total_id);
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite batch loss {total}")));
    }
    tape.backward(total_id)?;

    let grads = ids
        .ordered()
        .iter()
        .map(|&id| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(id).len()],
        })
        .collect();
    Ok(StepResult { total, grads })
}

struct PhaseOutcome {
    records: Vec<EpochRecord>,
    selected_epoch: usize,
}

fn run_phase(
    model: &mut Model,
    ds: &DatasetSplit,
    config: &TrainConfig,
    objective: Objective,
    phase: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseOutcome> {
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let t = model.config.experts_active;
    let t_prime = model.config.experts_intervention;
    let dev_plan = BudgetPlan::uniform(&model.config, t)?;

    let mut records = Vec::new();
    let mut best: Option<(TaskMetric, f64, usize, Vec<f64>)> = None; // metric, concept f1, epoch, params
    let mut stale = 0usize;

    for epoch in 1..=config.max_epochs {
        let budget = if config.pseudo_intervention && objective != Objective::HeadOnly {
            pseudo_intervention_budget(epoch, config.max_epochs, t, t_prime)
        } else {
            t
        };

        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &ds.train[i]).collect();
            let step = train_step(model, &batch, budget, config, objective).map_err(|e| {
                match e {
                    Error::Numeric(message) => Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        message,
                    },
                    other => other,
                }
            })?;
            optimizer.step(model, &step.grads)?;
            epoch_loss += step.total;
            batches += 1;
        }

        let dev_trace = infer_examples(model, &ds.dev, &dev_plan, false)?;
        let dev_metrics = metrics_from_traces(&dev_trace, &ds.dev, &model.config.task_kind)?;
        let dev_loss = joint_loss(&dev_trace, &ds.dev, &model.config.task_kind, config.gamma)?;
        records.push(EpochRecord {
            phase,
            epoch,
            budget,
            train_loss: epoch_loss / batches.max(1) as f64,
            dev_loss: dev_loss.total(),
            dev_task_metric: dev_metrics.task,
            dev_concept_macro_f1: dev_metrics.concept_macro_f1,
        });

        let improved = match &best {
            None => true,
            Some((best_metric, best_concept, _, _)) => {
                if objective.selects_on_concepts() {
                    dev_metrics.concept_macro_f1 > *best_concept
                } else {
                    dev_metrics.task.better_than(best_metric)
                }
            }
        };
        if improved {
            best = Some((
                dev_metrics.task,
                dev_metrics.concept_macro_f1,
                epoch,
                model.flatten_params(),
            ));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (_, _, selected_epoch, params) =
        best.ok_or_else(|| Error::contract("no epochs completed"))?;
    model.unflatten_params(&params)?;
    Ok(PhaseOutcome {
        records,
        selected_epoch,
    })
}

/// Train in place, returning the epoch log. The model is left at the
/// checkpoint of the best dev epoch (early stopping).
pub fn train(model: &mut Model, ds: &DatasetSplit, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    ds.validate()?;
    ds.schema.check_model(&model.config)?;
    if ds.train.is_empty() || ds.dev.is_empty() {
        return Err(Error::contract("train and dev splits must be non-empty"));
    }
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut records = Vec::new();
    let (selected, head_source) = match config.strategy {
        Strategy::Joint => {
            let out = run_phase(model, ds, config, Objective::Joint, 1, &mut rng)?;
            records.extend(out.records);
            (out.selected_epoch, Objective::Joint.head_source())
        }
        Strategy::Vanilla => {
            let out = run_phase(model, ds, config, Objective::Vanilla, 1, &mut rng)?;
            records.extend(out.records);
            (out.selected_epoch, Objective::Vanilla.head_source())
        }
        Strategy::Independent => {
            let out = run_phase(model, ds, config, Objective::Independent, 1, &mut rng)?;
            records.extend(out.records);
            (out.selected_epoch, Objective::Independent.head_source())
        }
        Strategy::Sequential => {
            let first = run_phase(model, ds, config, Objective::ConceptOnly, 1, &mut rng)?;
            records.extend(first.records);
            let second = run_phase(model, ds, config, Objective::HeadOnly, 2, &mut rng)?;
            records.extend(second.records);
            (second.selected_epoch, Objective::HeadOnly.head_source())
        }
    };

    Ok(TrainReport {
        strategy: config.strategy,
        epochs: records,
        selected_epoch: selected,
        head_input_source: head_source,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
