use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::domain::{DomainId, DomainSchema};
use crate::error::{Error, Result};
use crate::eval::{decode_examples, example_bleu, token_accuracy, LabeledMatrix};
use crate::model::{Conditioning, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    TokenAccuracy,
    Bleu,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::TokenAccuracy => "token-accuracy",
            Metric::Bleu => "bleu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "token-accuracy" | "accuracy" => Ok(Metric::TokenAccuracy),
            "bleu" => Ok(Metric::Bleu),
            _ => Err(Error::config(format!("unknown metric `{s}` (token-accuracy, bleu)"))),
        }
    }
}

/// Scores of each test set (rows) decoded under each label (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMatrix {
    pub matrix: LabeledMatrix,
    pub metric: Metric,
    pub model_id: String,
    pub seed: u64,
}

impl RobustnessMatrix {
    /// Mean over rows of `diagonal − mean(off-diagonal)`.
    pub fn degradation(&self) -> f64 {
        let n = self.matrix.rows.len();
        if n < 2 {
            return 0.0;
        }
        let per_row: f64 = (0..n)
            .map(|i| {
                let off: f64 = (0..n).filter(|&j| j != i).map(|j| self.matrix.get(i, j)).sum();
                self.matrix.get(i, i) - off / (n - 1) as f64
            })
            .sum();
        per_row / n as f64
    }
}

fn score(model: &Model, schema: &DomainSchema, examples: &[Example], label: DomainId, metric: Metric) -> Result<f64> {
    let hyps = decode_examples(model, schema, examples, Some(label))?.hypotheses;
    match metric {
        Metric::TokenAccuracy => Ok(token_accuracy(&hyps, examples)?.rate().unwrap_or(0.0)),
        Metric::Bleu => example_bleu(&hyps, examples),
    }
}

/// Decodes every test set under every label. `testsets[i]` belongs to
/// `labels[i]`, so the diagonal holds correct-label scores.
pub fn wrong_label_matrix(
    model: &Model,
    schema: &DomainSchema,
    testsets: &[&[Example]],
    labels: &[DomainId],
    metric: Metric,
) -> Result<RobustnessMatrix> {
    if model.config.conditioning == Conditioning::None {
        return Err(Error::contract("wrong-label decoding needs a model that conditions on domain labels"));
    }
    if testsets.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} test sets for {} labels",
            testsets.len(),
            labels.len()
        )));
    }
    let mut values = Vec::with_capacity(labels.len());
    for set in testsets {
        values.push(
            labels
                .iter()
                .map(|&l| score(model, schema, set, l, metric))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let names: Vec<String> = labels.iter().map(|&d| schema.name(d).to_string()).collect();
    Ok(RobustnessMatrix {
        matrix: LabeledMatrix::new(names.clone(), names, values)?,
        metric,
        model_id: format!("{}+{}", model.config.ffn_variant.name(), model.config.conditioning.name()),
        seed: model.config.seed,
    })
}
