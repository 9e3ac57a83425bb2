//! Wall-clock inference benchmarks: repeated full-test-set greedy decodes
//! per batch size, aggregated by median and coefficient of variation.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Example;
use crate::domain::{DomainId, DomainSchema, Token};
use crate::error::{Error, Result};
use crate::eval::{greedy_search_limits, ModelScorer};
use crate::model::Model;
use crate::numerics::Precision;
use crate::train::routing_label;

/// Where a measurement was taken.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub host: String,
    pub cores: usize,
    pub os: String,
    pub arch: String,
    pub precision: String,
    pub workers: usize,
}

impl Environment {
    pub fn current() -> Self {
        let host = std::env::var("HOSTNAME")
            .ok()
            .or_else(|| std::fs::read_to_string("/etc/hostname").ok())
            .map(|h| h.trim().to_string())
            .filter(|h| !h.is_empty())
            .unwrap_or_else(|| "unknown".into());
        Environment {
            host,
            cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            precision: Precision::current().name().into(),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config_id: String,
    /// Digest of the test-set sources, to tell comparable results apart.
    pub testset: String,
    pub batch_size: usize,
    /// Always `"tokens"`: batches are filled up to this many source tokens.
    pub batch_unit: String,
    pub warmup: usize,
    pub repeats: usize,
    /// Seconds per timed repeat.
    pub times: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation over mean; 0 for a single repeat.
    pub cv: f64,
    /// Output tokens produced per repeat.
    pub decoded_tokens: usize,
    pub tokens_per_sec: f64,
    pub environment: Environment,
}

impl BenchResult {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("bench results serialize")
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var.sqrt() / mean
}

/// Consecutive index ranges holding at most `batch_tokens` source tokens
/// each; an example longer than the budget gets a batch of its own.
pub fn token_batches(lengths: &[usize], batch_tokens: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut tokens = 0;
    for (i, &len) in lengths.iter().enumerate() {
        if i > start && tokens + len > batch_tokens {
            out.push(start..i);
            start = i;
            tokens = 0;
        }
        tokens += len;
    }
    if start < lengths.len() {
        out.push(start..lengths.len());
    }
    out
}

/// A test set already split and prepared for decoding, so that the timed
/// region holds nothing but decoding.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub sources: Vec<Vec<Token>>,
    pub labels: Vec<DomainId>,
    pub limits: Vec<usize>,
}

pub fn prepare_batches(model: &Model, schema: &DomainSchema, testset: &[Example], batch_tokens: usize) -> Result<Vec<PreparedBatch>> {
    let labels: Vec<DomainId> = testset.iter().map(|e| routing_label(model, e.assigned_domain)).collect();
    let sources = testset
        .iter()
        .zip(&labels)
        .map(|(e, &d)| model.prepare_source(&e.source, d, schema))
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = sources.iter().map(Vec::len).collect();
    Ok(token_batches(&lengths, batch_tokens)
        .into_iter()
        .map(|r| PreparedBatch {
            limits: sources[r.clone()].iter().map(|s| s.len() + 1).collect(),
            sources: sources[r.clone()].to_vec(),
            labels: labels[r].to_vec(),
        })
        .collect())
}

fn testset_digest(testset: &[Example]) -> String {
    let mut h = Sha256::new();
    for e in testset {
        for t in &e.source {
            h.update(t.to_le_bytes());
        }
        h.update([0xff]);
    }
    format!("{:x}", h.finalize())[..16].to_string()
}

#[derive(Clone, Copy, Debug)]
pub struct BenchSpec {
    pub batch_tokens: usize,
    pub repeats: usize,
    pub warmup: usize,
}

/// Times `decode` over all batches `spec.repeats` times after
/// `spec.warmup` untimed passes. `decode` returns the tokens it produced.
pub fn benchmark_with<F>(config_id: &str, testset: &[Example], batches: &[PreparedBatch], spec: BenchSpec, mut decode: F) -> Result<BenchResult>
where
    F: FnMut(&PreparedBatch) -> Result<usize>,
{
    if testset.is_empty() {
        return Err(Error::contract("benchmark needs a non-empty test set"));
    }
    if spec.repeats == 0 {
        return Err(Error::contract("benchmark needs at least one repeat"));
    }
    let pass = |decode: &mut F| -> Result<usize> { batches.iter().map(|b| decode(b)).sum() };
    for _ in 0..spec.warmup {
        pass(&mut decode)?;
    }
    let mut times = Vec::with_capacity(spec.repeats);
    let mut produced = None;
    for _ in 0..spec.repeats {
        let start = Instant::now();
        let n = pass(&mut decode)?;
        times.push(start.elapsed().as_secs_f64());
        match produced {
            None => produced = Some(n),
            Some(p) if p != n => {
                return Err(Error::numeric(format!("repeats decoded {p} and {n} tokens")));
            }
            _ => {}
        }
    }
    let decoded_tokens = produced.unwrap_or(0);
    let med = median(&times);
    Ok(BenchResult {
        config_id: config_id.to_string(),
        testset: testset_digest(testset),
        batch_size: spec.batch_tokens,
        batch_unit: "tokens".into(),
        warmup: spec.warmup,
        repeats: spec.repeats,
        mean: times.iter().sum::<f64>() / times.len() as f64,
        cv: coefficient_of_variation(&times),
        median: med,
        tokens_per_sec: if med > 0.0 { decoded_tokens as f64 / med } else { f64::INFINITY },
        times,
        decoded_tokens,
        environment: Environment::current(),
    })
}

/// Greedy decoding of the whole test set with `model`.
pub fn benchmark_inference(
    model: &Model,
    schema: &DomainSchema,
    config_id: &str,
    testset: &[Example],
    spec: BenchSpec,
) -> Result<BenchResult> {
    let batches = prepare_batches(model, schema, testset, spec.batch_tokens)?;
    benchmark_with(config_id, testset, &batches, spec, |b| {
        let mut scorer = ModelScorer::new(model, &b.sources, &b.labels)?;
        let out = greedy_search_limits(&mut scorer, &b.limits)?;
        Ok(out.iter().map(Vec::len).sum())
    })
}

/// The harness with a decoder that emits nothing: its time bounds the
/// overhead outside the model.
pub fn benchmark_noop(model: &Model, schema: &DomainSchema, testset: &[Example], spec: BenchSpec) -> Result<BenchResult> {
    let batches = prepare_batches(model, schema, testset, spec.batch_tokens)?;
    benchmark_with("no-op", testset, &batches, spec, |b| Ok(std::hint::black_box(b.sources.len()) * 0))
}

/// Median-time ratios against a baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub batch_size: usize,
    pub rows: Vec<ComparisonRow>,
    pub environment: Environment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub config_id: String,
    pub median: f64,
    pub ratio: f64,
}

pub fn compare_configs(results: &[BenchResult], baseline: &str) -> Result<Comparison> {
    let first = results.first().ok_or_else(|| Error::contract("nothing to compare"))?;
    for r in results {
        if r.testset != first.testset || r.batch_size != first.batch_size {
            return Err(Error::contract(format!(
                "`{}` and `{}` ran on different test sets or batch sizes",
                first.config_id, r.config_id
            )));
        }
    }
    let base = results
        .iter()
        .find(|r| r.config_id == baseline)
        .ok_or_else(|| Error::lookup("baseline config", baseline))?;
    Ok(Comparison {
        baseline: baseline.to_string(),
        batch_size: first.batch_size,
        rows: results
            .iter()
            .map(|r| ComparisonRow {
                config_id: r.config_id.clone(),
                median: r.median,
                ratio: r.median / base.median,
            })
            .collect(),
        environment: first.environment.clone(),
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,batch_size,median_sec,ratio\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.config_id, self.batch_size, r.median, r.ratio));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_splits, SyntheticConfig};
    use crate::model::{Conditioning, FfnVariant, ModelConfig};

    fn fixture() -> (DomainSchema, Vec<Example>, Model) {
        let data = SyntheticConfig {
            seen_domains: 2,
            range_size: 4,
            shared_size: 4,
            generic_coverage: 1,
            train_size: 10,
            generic_train_size: 10,
            test_size: 9,
            valid_size: 2,
            min_len: 2,
            max_len: 6,
            ..SyntheticConfig::default()
        };
        let schema = data.build_schema().unwrap();
        let splits = generate_splits(&data, &schema).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_variant: FfnVariant::Smoe,
            experts: 2,
            top_k: 1,
            conditioning: Conditioning::Tags,
            ..ModelConfig::default()
        };
        let model = Model::build(&cfg, &schema).unwrap();
        (schema, splits.test[1].clone(), model)
    }

    #[test]
    fn statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(coefficient_of_variation(&[5.0]), 0.0);
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]), 0.0);
        // mean 2, sample variance 1
        assert!((coefficient_of_variation(&[1.0, 2.0, 3.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn token_budget_batching() {
        assert_eq!(token_batches(&[3, 3, 3], 1), vec![0..1, 1..2, 2..3]);
        assert_eq!(token_batches(&[3, 3, 3], 6), vec![0..2, 2..3]);
        assert_eq!(token_batches(&[3, 3, 3], 512), vec![0..3]);
        assert!(token_batches(&[], 4).is_empty());
    }

    #[test]
    fn batch_size_does_not_change_output() {
        let (schema, set, model) = fixture();
        let mut counts = Vec::new();
        for bt in [1, 64, 512] {
            let spec = BenchSpec { batch_tokens: bt, repeats: 2, warmup: 1 };
            let r = benchmark_inference(&model, &schema, "m", &set, spec).unwrap();
            assert_eq!(r.times.len(), 2);
            assert_eq!(r.batch_unit, "tokens");
            counts.push(r.decoded_tokens);
            let back: BenchResult = serde_json::from_str(&r.to_json_line()).unwrap();
            assert_eq!(back, r);
        }
        assert!(counts[0] > 0 && counts.iter().all(|&c| c == counts[0]));
    }

    #[test]
    fn contracts() {
        let (schema, set, model) = fixture();
        let spec = BenchSpec { batch_tokens: 8, repeats: 1, warmup: 0 };
        assert!(matches!(benchmark_inference(&model, &schema, "m", &[], spec), Err(Error::Contract(_))));
        let one = benchmark_inference(&model, &schema, "m", &set, spec).unwrap();
        assert_eq!(one.cv, 0.0);
        let noop = benchmark_noop(&model, &schema, &set, spec).unwrap();
        assert_eq!(noop.decoded_tokens, 0);

        let cmp = compare_configs(&[one.clone(), noop.clone()], "m").unwrap();
        assert_eq!(cmp.rows[0].ratio, 1.0);
        assert!(matches!(compare_configs(&[one.clone()], "x"), Err(Error::Lookup { .. })));
        let mut other = one.clone();
        other.batch_size = 64;
        assert!(matches!(compare_configs(&[one.clone(), other], "m"), Err(Error::Contract(_))));
        let shorter = benchmark_inference(&model, &schema, "m", &set[..3], spec).unwrap();
        assert!(matches!(compare_configs(&[one, shorter], "m"), Err(Error::Contract(_))));
    }
}
