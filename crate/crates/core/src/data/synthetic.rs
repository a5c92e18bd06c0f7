//! Synthetic dataset generator with planted concept structure.
//!
//! Every concept is rendered as a three-word segment: a marker word plus one
//! word from each of two pools. Each pool has `arity` groups of synonyms and
//! the concept's value is `(i + j) % arity` for pool groups `i` and `j`, so
//! the value is recoverable from the text but only through a *conjunction*
//! of the two words — a bag-of-words linear readout cannot solve it. The
//! task label is a fixed weighted vote over concept values, which makes the
//! concept -> task causality exactly known.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::schema::{
    ConceptSchema, ConceptSpec, DatasetSplit, Example, Label, Provenance, TaskSpec,
};
use crate::error::{Error, Result};

/// Synonyms per pool group.
const SYNONYMS: usize = 2;
const FILLERS: [&str; 8] = ["the", "was", "and", "with", "a", "quite", "very", "overall"];

/// Default split sizes.
pub const DEFAULT_SIZES: [usize; 3] = [1755, 1673, 1685];

/// The default restaurant-review-shaped schema: four three-valued concepts
/// and a five-way star rating.
pub fn default_schema() -> ConceptSchema {
    let values = || {
        vec![
            "negative".to_string(),
            "unknown".to_string(),
            "positive".to_string(),
        ]
    };
    ConceptSchema {
        concepts: vec![
            ConceptSpec { name: "food".into(), values: values() },
            ConceptSpec { name: "ambiance".into(), values: values() },
            ConceptSpec { name: "service".into(), values: values() },
            ConceptSpec { name: "noise".into(), values: values() },
        ],
        task: TaskSpec::Classification {
            classes: (1..=5).map(|s| format!("{s}_star")).collect(),
        },
    }
}

/// Regression variant of the default schema (scores 0..9).
pub fn default_regression_schema() -> ConceptSchema {
    ConceptSchema {
        concepts: default_schema().concepts,
        task: TaskSpec::Regression { min: 0.0, max: 9.0 },
    }
}

/// The planted phrase bank: `phrases[concept][value]` lists every surface
/// rendering of that concept value.
#[derive(Clone, Debug)]
pub struct PhraseBank {
    pub phrases: Vec<Vec<Vec<String>>>,
}

impl PhraseBank {
    /// Derive the bank from a schema. Words are unique per concept and pool.
    pub fn for_schema(schema: &ConceptSchema) -> PhraseBank {
        let phrases = schema
            .concepts
            .iter()
            .map(|c| {
                let arity = c.values.len();
                let word = |pool: char, group: usize, syn: usize| {
                    format!("{}{}{}{}", c.name, pool, group, (b'x' + syn as u8) as char)
                };
                (0..arity)
                    .map(|value| {
                        let mut list = Vec::new();
                        for i in 0..arity {
                            let j = (arity + value - i) % arity; // (i + j) % arity == value
                            for si in 0..SYNONYMS {
                                for sj in 0..SYNONYMS {
                                    list.push(format!(
                                        "{} {} {}",
                                        c.name,
                                        word('a', i, si),
                                        word('b', j, sj)
                                    ));
                                }
                            }
                        }
                        list
                    })
                    .collect()
            })
            .collect();
        PhraseBank { phrases }
    }

    /// Phrases rendering `(concept, value)`.
    pub fn phrases_for(&self, concept: usize, value: usize) -> &[String] {
        &self.phrases[concept][value]
    }

    /// The planted value a phrase renders, if the phrase belongs to the bank.
    pub fn value_of_phrase(&self, concept: usize, phrase: &str) -> Option<usize> {
        self.phrases[concept]
            .iter()
            .position(|list| list.iter().any(|p| p == phrase))
    }
}

/// Default label-function weights: linearly decaying from 1.5 to 0.5.
pub fn default_weights(num_concepts: usize) -> Vec<f64> {
    if num_concepts == 1 {
        return vec![1.0];
    }
    (0..num_concepts)
        .map(|k| 0.5 + (num_concepts - 1 - k) as f64 / (num_concepts - 1) as f64)
        .collect()
}

/// Evenly spaced value score in `[-1, 1]` (first value most negative).
fn value_score(value: usize, arity: usize) -> f64 {
    2.0 * value as f64 / (arity - 1) as f64 - 1.0
}

/// The noise-free task label as a pure function of concept values.
pub fn label_from_concepts(
    schema: &ConceptSchema,
    weights: &[f64],
    concepts: &[usize],
) -> Result<Label> {
    if weights.len() != schema.num_concepts() || concepts.len() != schema.num_concepts() {
        return Err(Error::contract("weights/concepts length mismatch"));
    }
    let total: f64 = weights.iter().map(|w| w.abs()).sum();
    let score: f64 = concepts
        .iter()
        .zip(&schema.concepts)
        .zip(weights)
        .map(|((&v, spec), &w)| w * value_score(v, spec.values.len()))
        .sum();
    let unit = (score + total) / (2.0 * total); // in [0, 1]
    Ok(match &schema.task {
        TaskSpec::Classification { classes } => {
            let c = (unit * (classes.len() - 1) as f64).round() as usize;
            Label::Class(c.min(classes.len() - 1))
        }
        TaskSpec::Regression { min, max } => Label::Real(min + unit * (max - min)),
    })
}

/// Generate seeded train/dev/test splits with planted concept structure.
///
/// Labels are the deterministic vote of `label_from_concepts`; with
/// probability `noise_rate` a task label is flipped to a different class
/// (classification) or perturbed by unit noise and clipped (regression).
pub fn generate_synthetic(
    schema: &ConceptSchema,
    sizes: [usize; 3],
    noise_rate: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    schema.validate()?;
    if !(0.0..0.5).contains(&noise_rate) {
        return Err(Error::config(format!(
            "noise_rate {noise_rate} outside [0, 0.5)"
        )));
    }
    let weights = default_weights(schema.num_concepts());
    let bank = PhraseBank::for_schema(schema);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut next_id = 0usize;
    let mut make_split = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let concepts: Vec<usize> = schema
                .concepts
                .iter()
                .map(|c| rng.gen_range(0..c.values.len()))
                .collect();
            let mut segments = Vec::with_capacity(schema.num_concepts() * 2);
            for (k, &v) in concepts.iter().enumerate() {
                segments.push(FILLERS[rng.gen_range(0..FILLERS.len())].to_string());
                let options = bank.phrases_for(k, v);
                segments.push(options[rng.gen_range(0..options.len())].clone());
            }
            let text = segments.join(" ");
            let mut label = label_from_concepts(schema, &weights, &concepts)?;
            if noise_rate > 0.0 && rng.gen_range(0.0..1.0) < noise_rate {
                label = match (&schema.task, label) {
                    (TaskSpec::Classification { classes }, Label::Class(c)) => {
                        let shift = rng.gen_range(1..classes.len());
                        Label::Class((c + shift) % classes.len())
                    }
                    (TaskSpec::Regression { min, max }, Label::Real(v)) => {
                        let delta: f64 = rng.gen_range(-1.0..1.0) * (max - min) * 0.2;
                        Label::Real((v + delta).clamp(*min, *max))
                    }
                    (_, l) => l,
                };
            }
            out.push(Example {
                id: next_id,
                text,
                tokens: Vec::new(),
                concepts,
                label,
            });
            next_id += 1;
        }
        Ok(out)
    };

    let train = make_split(sizes[0], &mut rng)?;
    let dev = make_split(sizes[1], &mut rng)?;
    let test = make_split(sizes[2], &mut rng)?;
    let ds = DatasetSplit {
        schema: schema.clone(),
        train,
        dev,
        test,
        provenance: Provenance::Generated {
            seed,
            noise_rate,
            label_weights: weights,
        },
    };
    ds.validate()?;
    Ok(ds)
}
