use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::domain::{DomainId, DomainSchema};
use crate::error::{Error, Result};
use crate::eval::{decode_examples, LabeledMatrix};
use crate::model::{FfnVariant, Model};
use crate::moe::{GateTrace, Stack};

/// Per sparse layer, the fraction of tokens whose first-choice expert is
/// each expert; `values[layer · experts + e]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub experts: usize,
    pub layers: Vec<Stack>,
    pub values: Vec<f64>,
}

impl ActivityProfile {
    pub fn block(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.experts..(layer + 1) * self.experts]
    }

    /// Only the layers of one stack.
    pub fn stack(&self, stack: Stack) -> ActivityProfile {
        let keep: Vec<usize> = (0..self.layers.len()).filter(|&l| self.layers[l] == stack).collect();
        ActivityProfile {
            experts: self.experts,
            layers: keep.iter().map(|_| stack).collect(),
            values: keep.iter().flat_map(|&l| self.block(l).iter().copied()).collect(),
        }
    }
}

/// Top-1 activity, pooling source and target tokens.
pub fn top1_activity(trace: &GateTrace) -> Result<ActivityProfile> {
    let (n, layers) = (trace.experts, trace.layers.len());
    let mut counts = vec![0usize; n * layers];
    let mut per_layer = vec![0usize; layers];
    for e in &trace.entries {
        let first = *e
            .experts
            .first()
            .ok_or_else(|| Error::contract("trace entry without a selected expert"))?;
        if e.layer >= layers || first >= n {
            return Err(Error::contract(format!(
                "trace entry routes layer {} to expert {first} outside {layers} layers × {n} experts",
                e.layer
            )));
        }
        counts[e.layer * n + first] += 1;
        per_layer[e.layer] += 1;
    }
    if layers == 0 {
        return Err(Error::contract("trace has no sparse layers"));
    }
    if let Some(l) = per_layer.iter().position(|&c| c == 0) {
        return Err(Error::contract(format!("trace has no tokens at sparse layer {l}")));
    }
    let values = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 / per_layer[i / n] as f64)
        .collect();
    Ok(ActivityProfile {
        experts: n,
        layers: trace.layers.clone(),
        values,
    })
}

/// Cosine similarity of two profiles; exactly 1 for identical ones.
pub fn expert_similarity(a: &ActivityProfile, b: &ActivityProfile) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::contract(format!(
            "profiles of length {} and {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let (na, nb) = (sq(&a.values), sq(&b.values));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("similarity of a zero-norm profile"));
    }
    if a.values == b.values {
        return Ok(1.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb).sqrt()).clamp(0.0, 1.0))
}

/// Pairwise similarities; symmetric by construction with a unit diagonal.
pub fn similarity_matrix(names: Vec<String>, profiles: &[ActivityProfile]) -> Result<LabeledMatrix> {
    let n = profiles.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = expert_similarity(&profiles[i], &profiles[j])?;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    LabeledMatrix::new(names.clone(), names, values)
}

/// Decodes one dataset under each label and compares the resulting
/// activity profiles.
pub fn label_sweep_similarity(model: &Model, schema: &DomainSchema, dataset: &[Example], labels: &[DomainId]) -> Result<LabeledMatrix> {
    if model.config.ffn_variant != FfnVariant::Smoe {
        return Err(Error::contract("label sweep needs a sparse model"));
    }
    let mut profiles = Vec::with_capacity(labels.len());
    for &l in labels {
        let trace = decode_examples(model, schema, dataset, Some(l))?
            .trace
            .ok_or_else(|| Error::contract("sparse model produced no trace"))?;
        profiles.push(top1_activity(&trace)?);
    }
    let names = labels.iter().map(|&d| schema.name(d).to_string()).collect();
    similarity_matrix(names, &profiles)
}

/// Mean of the entries above the diagonal.
pub fn mean_off_diagonal(m: &LabeledMatrix) -> f64 {
    let n = m.rows.len();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            sum += m.get(i, j);
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}
