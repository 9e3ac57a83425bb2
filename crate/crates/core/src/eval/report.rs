use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::domain::{DomainId, DomainSchema, Token};
use crate::error::Result;
use crate::eval::{decode_examples, example_bleu, masked_accuracy, sequence_accuracy, token_accuracy};
use crate::model::Model;

/// Scores of one test set decoded under one label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScores {
    pub domain: String,
    pub label: String,
    pub examples: usize,
    pub token_accuracy: Option<f64>,
    pub sequence_accuracy: Option<f64>,
    pub bleu: f64,
    /// Accuracy at positions whose source token lies in the shared range.
    pub shared_accuracy: Option<f64>,
    /// Accuracy at positions whose source token lies in the domain's own ranges.
    pub range_accuracy: Option<f64>,
}

pub fn score_hypotheses(
    schema: &DomainSchema,
    domain: DomainId,
    label: DomainId,
    hyps: &[Vec<Token>],
    examples: &[Example],
) -> Result<DomainScores> {
    let task = schema.task(domain)?;
    let at = |e: &Example, p: usize| e.source.get(p).copied();
    let shared = masked_accuracy(hyps, examples, |e, p| at(e, p).is_some_and(|t| task.shared.contains(t)))?;
    let ranges = masked_accuracy(hyps, examples, |e, p| {
        at(e, p).is_some_and(|t| task.ranges.iter().any(|r| r.contains(t)))
    })?;
    Ok(DomainScores {
        domain: schema.name(domain).to_string(),
        label: schema.name(label).to_string(),
        examples: examples.len(),
        token_accuracy: token_accuracy(hyps, examples)?.rate(),
        sequence_accuracy: sequence_accuracy(hyps, examples)?.rate(),
        bleu: if examples.is_empty() { 0.0 } else { example_bleu(hyps, examples)? },
        shared_accuracy: shared.rate(),
        range_accuracy: ranges.rate(),
    })
}

/// Decodes `examples` of `domain` under `label` (the routing label of each
/// example when `None`) and scores the outputs.
pub fn evaluate_domain(
    model: &Model,
    schema: &DomainSchema,
    domain: DomainId,
    examples: &[Example],
    label: Option<DomainId>,
) -> Result<DomainScores> {
    let hyps = decode_examples(model, schema, examples, label)?.hypotheses;
    let shown = label.unwrap_or_else(|| crate::train::routing_label(model, domain));
    score_hypotheses(schema, domain, shown, &hyps, examples)
}

/// Every domain's test set under its own routing label (the generic label
/// for unlabeled domains).
pub fn evaluate_all(model: &Model, schema: &DomainSchema, testsets: &[Vec<Example>]) -> Result<Vec<DomainScores>> {
    schema
        .ids()
        .zip(testsets)
        .map(|(d, set)| evaluate_domain(model, schema, d, set, None))
        .collect()
}

pub const SCORES_CSV_HEADER: &str =
    "domain,label,examples,token_accuracy,sequence_accuracy,bleu,shared_accuracy,range_accuracy";

pub fn scores_to_csv(scores: &[DomainScores]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{SCORES_CSV_HEADER}\n");
    for r in scores {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.domain,
            r.label,
            r.examples,
            opt(r.token_accuracy),
            opt(r.sequence_accuracy),
            r.bleu,
            opt(r.shared_accuracy),
            opt(r.range_accuracy)
        ));
    }
    s
}
