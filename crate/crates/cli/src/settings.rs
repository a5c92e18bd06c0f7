//! Flat key-value configuration files plus `--set` overrides.
//!
//! Format: one `key = value` per line, `#` starts a comment. Flags given on
//! the command line win over file values.

use std::collections::BTreeMap;
use std::path::Path;

use moce_core::data::ConceptSchema;
use moce_core::error::{Error, Result};
use moce_core::metacognition::{InterventionScope, ScrutinyStatistic};
use moce_core::model::ModelConfig;
use moce_core::training::{OptimizerKind, Strategy, TrainConfig};

/// One documented configuration key.
struct KeyDoc {
    key: &'static str,
    default: &'static str,
    doc: &'static str,
}

const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "max_seq_len", default: "24", doc: "maximum tokens per example" },
    KeyDoc { key: "embed_dim", default: "24", doc: "embedding width E" },
    KeyDoc { key: "num_heads", default: "2", doc: "attention heads (must divide embed_dim)" },
    KeyDoc { key: "num_attention_layers", default: "1", doc: "plain attention blocks before the expert stack" },
    KeyDoc { key: "num_moce_layers", default: "2", doc: "expert layers" },
    KeyDoc { key: "num_experts", default: "8", doc: "experts per layer, shared across concepts (M)" },
    KeyDoc { key: "experts_active", default: "1", doc: "per-concept expert budget T" },
    KeyDoc { key: "experts_intervention", default: "4", doc: "intervention budget T' (T < T' <= M)" },
    KeyDoc { key: "router_hidden_dim", default: "12", doc: "router MLP hidden width" },
    KeyDoc { key: "expert_hidden_dim", default: "24", doc: "expert MLP hidden width" },
    KeyDoc { key: "renormalize_gates", default: "false", doc: "rescale surviving gates to sum to 1" },
    KeyDoc { key: "strategy", default: "joint", doc: "vanilla | independent | sequential | joint" },
    KeyDoc { key: "gamma", default: "5.0", doc: "concept-loss weight (10.0 is the tuned alternative)" },
    KeyDoc { key: "balance_coefficient", default: "0.01", doc: "expert-importance balance loss weight" },
    KeyDoc { key: "learning_rate", default: "0.0003", doc: "step size" },
    KeyDoc { key: "batch_size", default: "8", doc: "examples per step" },
    KeyDoc { key: "max_epochs", default: "30", doc: "epoch budget" },
    KeyDoc { key: "patience", default: "5", doc: "non-improving dev epochs before stopping" },
    KeyDoc { key: "pseudo_intervention", default: "true", doc: "ramp the training budget from T to T' in the second half" },
    KeyDoc { key: "optimizer", default: "rms", doc: "rms | sgd" },
    KeyDoc { key: "seed", default: "7", doc: "RNG seed for init, shuffling, and generation" },
    KeyDoc { key: "statistic", default: "entropy", doc: "scrutiny statistic: entropy | max_prob" },
    KeyDoc { key: "intervention_scope", default: "all_layers", doc: "all_layers | final_layer" },
    KeyDoc { key: "num_concepts", default: "4", doc: "flops-only: concepts when no dataset is given" },
    KeyDoc { key: "concept_arity", default: "3", doc: "flops-only: uniform concept arity" },
    KeyDoc { key: "task_classes", default: "5", doc: "flops-only: task classes (0 = regression)" },
    KeyDoc { key: "vocab_size", default: "100", doc: "flops-only: vocabulary size placeholder" },
];

/// Generated reference page for every config key.
pub fn reference_page() -> String {
    let mut out = String::from(
        "Configuration keys (flat `key = value` file; `#` comments; CLI --set key=value overrides win)\n\n",
    );
    for k in KEYS {
        out.push_str(&format!("  {:<22} default {:<8} {}\n", k.key, k.default, k.doc));
    }
    out
}

/// Parsed settings: defaults, then file values, then overrides.
#[derive(Clone, Debug)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn defaults() -> Settings {
        Settings {
            values: KEYS
                .iter()
                .map(|k| (k.key.to_string(), k.default.to_string()))
                .collect(),
        }
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Settings> {
        let mut settings = Settings::defaults();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::config(format!(
                        "{}:{}: expected 'key = value'",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                settings.set(key.trim(), value.trim())?;
            }
        }
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::config(format!("--set '{item}': expected key=value"))
            })?;
            settings.set(key.trim(), value.trim())?;
        }
        Ok(settings)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|k| k.key == key) {
            return Err(Error::config(format!(
                "unknown config key '{key}' (see `moce reference`)"
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .expect("defaults cover every key")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::config(format!("config key '{key}': bad value '{}'", self.get(key))))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(Error::config(format!(
                "config key '{key}': bad boolean '{other}'"
            ))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn statistic(&self) -> Result<ScrutinyStatistic> {
        self.get("statistic").parse()
    }

    pub fn intervention_scope(&self) -> Result<InterventionScope> {
        match self.get("intervention_scope") {
            "all_layers" => Ok(InterventionScope::AllLayers),
            "final_layer" => Ok(InterventionScope::FinalLayerOnly),
            other => Err(Error::config(format!(
                "config key 'intervention_scope': bad value '{other}'"
            ))),
        }
    }

    /// Model config bound to a dataset schema and vocabulary.
    pub fn model_config(&self, schema: &ConceptSchema, vocab_size: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            vocab_size,
            max_seq_len: self.parse("max_seq_len")?,
            embed_dim: self.parse("embed_dim")?,
            num_heads: self.parse("num_heads")?,
            num_attention_layers: self.parse("num_attention_layers")?,
            num_moce_layers: self.parse("num_moce_layers")?,
            num_experts: self.parse("num_experts")?,
            experts_active: self.parse("experts_active")?,
            experts_intervention: self.parse("experts_intervention")?,
            concept_arities: schema.arities(),
            task_kind: schema.task.task_kind(),
            router_hidden_dim: self.parse("router_hidden_dim")?,
            expert_hidden_dim: self.parse("expert_hidden_dim")?,
            renormalize_gates: self.parse_bool("renormalize_gates")?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Model config for cost estimates without a dataset.
    pub fn standalone_model_config(&self) -> Result<ModelConfig> {
        let num_concepts: usize = self.parse("num_concepts")?;
        let arity: usize = self.parse("concept_arity")?;
        let classes: usize = self.parse("task_classes")?;
        let config = ModelConfig {
            vocab_size: self.parse("vocab_size")?,
            max_seq_len: self.parse("max_seq_len")?,
            embed_dim: self.parse("embed_dim")?,
            num_heads: self.parse("num_heads")?,
            num_attention_layers: self.parse("num_attention_layers")?,
            num_moce_layers: self.parse("num_moce_layers")?,
            num_experts: self.parse("num_experts")?,
            experts_active: self.parse("experts_active")?,
            experts_intervention: self.parse("experts_intervention")?,
            concept_arities: vec![arity; num_concepts],
            task_kind: if classes == 0 {
                moce_core::model::TaskKind::Regression
            } else {
                moce_core::model::TaskKind::Classification { classes }
            },
            router_hidden_dim: self.parse("router_hidden_dim")?,
            expert_hidden_dim: self.parse("expert_hidden_dim")?,
            renormalize_gates: self.parse_bool("renormalize_gates")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let strategy: Strategy = self.get("strategy").parse()?;
        let optimizer: OptimizerKind = self.get("optimizer").parse()?;
        let config = TrainConfig {
            strategy,
            gamma: self.parse("gamma")?,
            balance_coefficient: self.parse("balance_coefficient")?,
            learning_rate: self.parse("learning_rate")?,
            batch_size: self.parse("batch_size")?,
            max_epochs: self.parse("max_epochs")?,
            patience: self.parse("patience")?,
            pseudo_intervention: self.parse_bool("pseudo_intervention")?,
            optimizer,
            seed: self.seed()?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Resolved snapshot for manifests.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nembed_dim = 16\ngamma = 10.0\n").unwrap();
        let s = Settings::load(Some(&path), &["gamma=2.5".into()]).unwrap();
        assert_eq!(s.get("embed_dim"), "16");
        assert_eq!(s.get("gamma"), "2.5");
        assert_eq!(s.get("batch_size"), "8"); // default
    }

    #[test]
    fn unknown_key_rejected() {
        let err = Settings::load(None, &["nope=1".into()]).unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn reference_covers_all_keys() {
        let page = reference_page();
        for k in KEYS {
            assert!(page.contains(k.key));
        }
    }
}
