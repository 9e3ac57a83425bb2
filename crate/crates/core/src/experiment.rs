//! Flat `key = value` experiment files.
//!
//! One file fixes a whole run: architecture, synthetic data, training and
//! domain randomization. Every key has a default and unknown keys are
//! rejected. Keys are the field names of [`ModelConfig`], [`SyntheticConfig`]
//! and [`TrainConfig`], except for three renamed to avoid clashes: `seed` is
//! the model initialization seed, `data_seed` seeds corpus generation and
//! `train_seed` seeds the training stream. Two keys choose the domain schema:
//! `schema = synthetic` (the default) derives it from the data keys, and
//! `schema = labels` builds a task-free schema from `labeled_domains`, a
//! comma-separated list starting with the generic domain.
//!
//! ```
//! use moelab::experiment::ExperimentConfig;
//!
//! let cfg = ExperimentConfig::parse("ffn_variant = smoe\nexperts = 4\n# comment\n").unwrap();
//! assert_eq!(cfg.model.experts, 4);
//! assert_eq!(ExperimentConfig::parse(&cfg.emit()).unwrap(), cfg);
//! assert!(ExperimentConfig::parse("expert = 4").is_err());
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::data::{generate_splits, SyntheticConfig, SyntheticData, TrainingStream};
use crate::domain::DomainSchema;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemaKind {
    Synthetic,
    Labels,
}

impl SchemaKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemaKind::Synthetic => "synthetic",
            SchemaKind::Labels => "labels",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(SchemaKind::Synthetic),
            "labels" => Ok(SchemaKind::Labels),
            _ => Err(Error::config(format!("unknown schema kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub schema: SchemaKind,
    pub labeled_domains: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            data: SyntheticConfig::default(),
            train: TrainConfig::default(),
            schema: SchemaKind::Synthetic,
            labeled_domains: vec!["generic".into()],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Model,
    Data,
    Train,
}

const RENAMED: [(Section, &str, &str); 3] = [
    (Section::Model, "seed", "seed"),
    (Section::Data, "seed", "data_seed"),
    (Section::Train, "seed", "train_seed"),
];

fn flat_key(section: Section, field: &str) -> String {
    RENAMED
        .iter()
        .find(|(s, f, _)| *s == section && *f == field)
        .map(|(_, _, k)| k.to_string())
        .unwrap_or_else(|| field.to_string())
}

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config sections serialize as objects"),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Reads a value in the type of the default it replaces.
fn read_as(default: &Value, raw: &str, key: &str) -> Result<Value> {
    let bad = || Error::config(format!("bad value `{raw}` for `{key}`"));
    Ok(match default {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(_) => {
            let n: Value = serde_json::from_str(raw).map_err(|_| bad())?;
            if !n.is_number() {
                return Err(bad());
            }
            n
        }
        // Optional path
        Value::Null if raw.is_empty() => Value::Null,
        Value::Null => Value::String(raw.to_string()),
        _ => return Err(bad()),
    })
}

fn rebuild<T: DeserializeOwned>(map: Map<String, Value>, what: &str) -> Result<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::config(format!("{what} keys: {e}")))
}

impl ExperimentConfig {
    fn sections(&self) -> [(Section, Map<String, Value>); 3] {
        [
            (Section::Model, to_map(&self.model)),
            (Section::Data, to_map(&self.data)),
            (Section::Train, to_map(&self.train)),
        ]
    }

    /// Every key with its rendered value, in a fixed order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("schema".to_string(), self.schema.name().to_string()),
            ("labeled_domains".to_string(), self.labeled_domains.join(",")),
        ];
        for (section, map) in self.sections() {
            for (field, v) in map {
                out.push((flat_key(section, &field), render(&v)));
            }
        }
        out
    }

    pub fn emit(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Overrides defaults with `pairs`; later pairs win.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut sections = cfg.sections();
        for (k, v) in pairs {
            let (key, raw) = (k.as_ref().trim(), v.as_ref().trim());
            match key {
                "schema" => cfg.schema = SchemaKind::parse(raw)?,
                "labeled_domains" => {
                    cfg.labeled_domains = raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
                }
                _ => {
                    let slot = sections.iter_mut().find_map(|(section, map)| {
                        let field = map.keys().find(|f| flat_key(*section, f) == key)?.clone();
                        Some((map, field))
                    });
                    let (map, field) = slot.ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
                    let value = read_as(&map[&field], raw, key)?;
                    map.insert(field, value);
                }
            }
        }
        let [(_, model), (_, data), (_, train)] = sections;
        cfg.model = rebuild(model, "model")?;
        cfg.data = rebuild(data, "data")?;
        cfg.train = rebuild(train, "training")?;
        Ok(cfg)
    }

    /// `key = value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn build_schema(&self) -> Result<DomainSchema> {
        match self.schema {
            SchemaKind::Synthetic => self.data.build_schema(),
            SchemaKind::Labels => {
                if self.model.vocab_size == 0 {
                    return Err(Error::config("`schema = labels` needs an explicit vocab_size"));
                }
                let names: Vec<&str> = self.labeled_domains.iter().map(String::as_str).collect();
                DomainSchema::labels_only(&names, self.model.vocab_size)
            }
        }
    }

    /// Deterministic corpora of the synthetic schema.
    pub fn generate(&self, schema: &DomainSchema) -> Result<SyntheticData> {
        if self.schema != SchemaKind::Synthetic {
            return Err(Error::config("data generation needs `schema = synthetic`"));
        }
        generate_splits(&self.data, schema)
    }

    /// Training stream over `train` with the schema's sampling
    /// probabilities and the model's domain-randomization probability.
    pub fn stream(&self, schema: &DomainSchema, train: Vec<Vec<crate::data::Example>>) -> Result<TrainingStream> {
        TrainingStream::new(train, &schema.sampling_probs(), self.model.dr_probability, self.train.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conditioning, FfnVariant};

    #[test]
    fn defaults_round_trip() {
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse("").unwrap(), d);
        assert_eq!(ExperimentConfig::parse(&d.emit()).unwrap(), d);
        let keys: Vec<String> = d.pairs().into_iter().map(|(k, _)| k).collect();
        let mut unique = keys.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), keys.len());
    }

    #[test]
    fn every_field_survives() {
        let mut c = ExperimentConfig::default();
        c.model.ffn_variant = FfnVariant::Smoe;
        c.model.conditioning = Conditioning::DomainSpecializedGate;
        c.model.width_multiplier = 1.5;
        c.model.dr_probability = 0.1 + 0.2;
        c.model.seed = 9;
        c.data.seed = 10;
        c.data.mixture = crate::data::Mixture::SeenOnly;
        c.data.unseen_related = false;
        c.train.seed = 11;
        c.train.lr_max = 3e-3;
        c.train.checkpoint_path = Some("a/b.ckpt".into());
        c.schema = SchemaKind::Labels;
        c.labeled_domains = vec!["generic".into(), "law".into()];
        let text = c.emit();
        assert!(text.contains("data_seed = 10\n") && text.contains("train_seed = 11\n") && text.contains("seed = 9\n"));
        assert!(text.contains("conditioning = domain-specialized-gate\n"));
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.dr_probability.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["nope = 1", "experts = many", "experts = -1", "ffn_variant = huge", "schema = other", "experts"] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn schema_choice() {
        let c = ExperimentConfig::parse("schema = labels\nlabeled_domains = generic, law, medical\nvocab_size = 100").unwrap();
        let s = c.build_schema().unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.vocab_size(), 100);
        assert!(c.generate(&s).is_err());
        assert!(ExperimentConfig::parse("schema = labels").unwrap().build_schema().is_err());
        let syn = ExperimentConfig::default();
        assert_eq!(syn.build_schema().unwrap().vocab_size(), syn.data.vocab_size());
    }
}
