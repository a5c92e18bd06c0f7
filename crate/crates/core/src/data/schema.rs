//! Concept schema, labeled examples, and dataset splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskKind};

/// One concept: a name and its ordered value vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub values: Vec<String>,
}

/// Task label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Classification { classes: Vec<String> },
    /// Real-valued scores in `[min, max]`.
    Regression { min: f64, max: f64 },
}

impl TaskSpec {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            TaskSpec::Classification { classes } => TaskKind::Classification {
                classes: classes.len(),
            },
            TaskSpec::Regression { .. } => TaskKind::Regression,
        }
    }
}

/// Names and arities of all concepts plus the task label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSchema {
    pub concepts: Vec<ConceptSpec>,
    pub task: TaskSpec,
}

impl ConceptSchema {
    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn arities(&self) -> Vec<usize> {
        self.concepts.iter().map(|c| c.values.len()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::Schema("schema has no concepts".into()));
        }
        let mut names: Vec<&str> = self.concepts.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.concepts.len() {
            return Err(Error::Schema("concept names are not unique".into()));
        }
        for c in &self.concepts {
            if c.values.len() < 2 {
                return Err(Error::Schema(format!(
                    "concept '{}' needs at least 2 values",
                    c.name
                )));
            }
            let mut vals: Vec<&str> = c.values.iter().map(|v| v.as_str()).collect();
            vals.sort_unstable();
            vals.dedup();
            if vals.len() != c.values.len() {
                return Err(Error::Schema(format!(
                    "concept '{}' has duplicate values",
                    c.name
                )));
            }
        }
        match &self.task {
            TaskSpec::Classification { classes } => {
                if classes.len() < 2 {
                    return Err(Error::Schema("task needs at least 2 classes".into()));
                }
            }
            TaskSpec::Regression { min, max } => {
                if min >= max {
                    return Err(Error::Schema("regression range is empty".into()));
                }
            }
        }
        Ok(())
    }

    /// Check that a model was built for this schema.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if config.concept_arities != self.arities() {
            return Err(Error::Schema(format!(
                "model arities {:?} do not match schema arities {:?}",
                config.concept_arities,
                self.arities()
            )));
        }
        if config.task_kind != self.task.task_kind() {
            return Err(Error::Schema(
                "model task kind does not match schema".into(),
            ));
        }
        Ok(())
    }

    pub fn value_index(&self, concept: usize, value: &str) -> Option<usize> {
        self.concepts[concept].values.iter().position(|v| v == value)
    }
}

/// Task label: class index or real value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Real(f64),
}

impl Label {
    pub fn class(&self) -> Result<usize> {
        match self {
            Label::Class(c) => Ok(*c),
            Label::Real(_) => Err(Error::contract("expected a class label")),
        }
    }

    pub fn real(&self) -> Result<f64> {
        match self {
            Label::Real(v) => Ok(*v),
            Label::Class(_) => Err(Error::contract("expected a real label")),
        }
    }
}

/// One annotated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub text: String,
    /// Token ids; empty until a vocabulary tokenizes the split.
    pub tokens: Vec<usize>,
    /// Value index per concept, in schema order.
    pub concepts: Vec<usize>,
    pub label: Label,
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Files { dir: String },
    Generated { seed: u64, noise_rate: f64, label_weights: Vec<f64> },
}

/// Train/dev/test splits sharing one schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub schema: ConceptSchema,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub provenance: Provenance,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let mut ids = Vec::new();
        for ex in self.train.iter().chain(&self.dev).chain(&self.test) {
            ids.push(ex.id);
            if ex.concepts.len() != self.schema.num_concepts() {
                return Err(Error::Schema(format!(
                    "example {} has {} concept labels, schema has {}",
                    ex.id,
                    ex.concepts.len(),
                    self.schema.num_concepts()
                )));
            }
            for (k, (&v, spec)) in ex.concepts.iter().zip(&self.schema.concepts).enumerate() {
                if v >= spec.values.len() {
                    return Err(Error::Index(format!(
                        "example {} concept {} value index {} out of range",
                        ex.id, k, v
                    )));
                }
            }
            match (&self.schema.task, &ex.label) {
                (TaskSpec::Classification { classes }, Label::Class(c)) => {
                    if *c >= classes.len() {
                        return Err(Error::Index(format!(
                            "example {} class {} out of range",
                            ex.id, c
                        )));
                    }
                }
                (TaskSpec::Regression { .. }, Label::Real(_)) => {}
                _ => {
                    return Err(Error::Schema(format!(
                        "example {} label kind does not match task",
                        ex.id
                    )));
                }
            }
        }
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::Schema("splits share example ids".into()));
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::contract(format!(
                "unknown split '{other}' (expected train, dev, or test)"
            ))),
        }
    }
}
