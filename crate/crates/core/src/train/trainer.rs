use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Example, TrainingStream};
use crate::domain::{DomainId, DomainSchema, PAD};
use crate::error::{Error, Result};
use crate::model::{Batch, Blob, Checkpoint, Mode, Model};
use crate::numerics::{Tape, Tensor};
use crate::train::{lr_schedule, Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_steps: u64,
    /// Target tokens per micro-batch; examples are added until reached.
    pub batch_tokens: usize,
    pub accumulation_steps: usize,
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Seed of the training stream.
    pub seed: u64,
    /// Metric and checkpoint interval in optimizer steps; 0 logs only at the end.
    pub eval_every: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            max_steps: 5000,
            batch_tokens: 1024,
            accumulation_steps: 1,
            lr_max: 1e-3,
            warmup_steps: 400,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            label_smoothing: 0.1,
            seed: 1,
            eval_every: 500,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.warmup_steps < 1 {
            errs.push("warmup_steps must be at least 1".to_string());
        }
        if !(self.lr_max > 0.0) {
            errs.push(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if self.batch_tokens == 0 {
            errs.push("batch_tokens must be positive".to_string());
        }
        if self.accumulation_steps == 0 {
            errs.push("accumulation_steps must be at least 1".to_string());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            errs.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            errs.push(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }
}

/// One line of the metric log. Accuracy is `None` for domains without
/// validation data.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: Vec<Option<f64>>,
}

pub fn metric_header(schema: &DomainSchema) -> String {
    let mut h = String::from("step,lr,loss");
    for d in schema.ids() {
        h.push_str(&format!(",acc_{}", schema.name(d)));
    }
    h
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{}", self.step, self.lr, self.loss);
        for a in &self.accuracy {
            match a {
                Some(a) => s.push_str(&format!(",{a}")),
                None => s.push(','),
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Training loss of every optimizer step run by this call.
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricRow>,
    pub checkpoint: Checkpoint,
}

/// Label under which an example is fed: its assigned domain when the model
/// can route on it, the generic label otherwise.
pub fn routing_label(model: &Model, d: DomainId) -> DomainId {
    if d.0 < model.labeled {
        d
    } else {
        DomainId::GENERIC
    }
}

/// Builds a padded batch with sources prepared for `model` (tagged when it
/// conditions on tags) under each example's routing label.
pub fn example_batch(model: &Model, schema: &DomainSchema, examples: &[Example]) -> Result<Batch> {
    let labels: Vec<DomainId> = examples.iter().map(|e| routing_label(model, e.assigned_domain)).collect();
    let sources = examples
        .iter()
        .zip(&labels)
        .map(|(e, &d)| model.prepare_source(&e.source, d, schema))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<_> = examples.iter().map(|e| e.target.clone()).collect();
    Batch::new(&sources, &targets, &labels)
}

/// Teacher-forced next-token accuracy over non-pad target positions;
/// ties in the argmax go to the lowest token id. `None` when empty.
pub fn teacher_forced_accuracy(model: &Model, schema: &DomainSchema, examples: &[Example]) -> Result<Option<f64>> {
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in examples.chunks(64) {
        let batch = example_batch(model, schema, chunk)?;
        let mut tape = Tape::inference(&model.store);
        let out = model.forward(&mut tape, &batch, Mode::Infer)?;
        let logits = tape.value(out.logits);
        for (r, &t) in batch.tgt_out.iter().enumerate() {
            if t == PAD {
                continue;
            }
            total += 1;
            if argmax(logits.row(r)) == t as usize {
                hit += 1;
            }
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

fn batch_digest(micro: &[Vec<Example>]) -> String {
    let mut h = Sha256::new();
    for e in micro.iter().flatten() {
        for t in e.source.iter().chain(&e.target) {
            h.update(t.to_le_bytes());
        }
        h.update([0xff]);
    }
    format!("{:x}", h.finalize())[..16].to_string()
}

/// Single-process trainer owning the model, optimizer state and stream.
pub struct Trainer<'a> {
    pub model: Model,
    schema: &'a DomainSchema,
    config: TrainConfig,
    adam: Adam,
    stream: TrainingStream,
    step: u64,
    validation: Vec<Vec<Example>>,
    config_echo: Vec<(String, String)>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, schema: &'a DomainSchema, stream: TrainingStream, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.schema_hash != schema.hash() {
            return Err(Error::Compat("model was built for a different domain schema".into()));
        }
        if stream.num_domains() != schema.len() {
            return Err(Error::Compat(format!(
                "stream samples {} domains, schema defines {}",
                stream.num_domains(),
                schema.len()
            )));
        }
        let adam = Adam::new(config.adam(), &model.store);
        Ok(Trainer {
            model,
            schema,
            config,
            adam,
            stream,
            step: 0,
            validation: Vec::new(),
            config_echo: Vec::new(),
        })
    }

    /// Per-domain validation corpora, indexed like the schema.
    pub fn with_validation(mut self, validation: Vec<Vec<Example>>) -> Self {
        self.validation = validation;
        self
    }

    /// Key/value pairs echoed into every checkpoint.
    pub fn with_config_echo(mut self, echo: Vec<(String, String)>) -> Self {
        self.config_echo = echo;
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Draws `accumulation_steps` micro-batches of at least `batch_tokens`
    /// target tokens each.
    pub fn draw_batch(&mut self) -> Vec<Vec<Example>> {
        (0..self.config.accumulation_steps)
            .map(|_| {
                let mut micro = Vec::new();
                let mut tokens = 0;
                while tokens < self.config.batch_tokens {
                    let e = self.stream.next_example();
                    tokens += e.target.len();
                    micro.push(e);
                }
                micro
            })
            .collect()
    }

    /// Zeroes the gradients and accumulates those of the per-token mean
    /// loss over all micro-batches together. Returns that loss.
    pub fn accumulate(&mut self, micro: &[Vec<Example>]) -> Result<f64> {
        let batches = micro
            .iter()
            .map(|m| example_batch(&self.model, self.schema, m))
            .collect::<Result<Vec<_>>>()?;
        let total: usize = batches.iter().map(Batch::target_tokens).sum();
        if total == 0 {
            return Err(Error::data("training batch has no target tokens"));
        }
        self.model.store.zero_grad();
        let mut loss_sum = 0.0;
        for batch in &batches {
            let mut tape = Tape::with_store(&self.model.store);
            let out = self.model.forward(&mut tape, batch, Mode::Train)?;
            let targets: Vec<usize> = batch.tgt_out.iter().map(|&t| t as usize).collect();
            let weights: Vec<f64> = batch
                .tgt_out
                .iter()
                .map(|&t| if t == PAD { 0.0 } else { 1.0 / total as f64 })
                .collect();
            let ce = tape.cross_entropy(out.logits, &targets, &weights, self.config.label_smoothing)?;
            let ce_value = tape.value(ce).item();
            let loss = match out.penalty {
                Some(p) => {
                    let share = batch.target_tokens() as f64 / total as f64;
                    let p = tape.scale(p, share)?;
                    tape.add(ce, p)?
                }
                None => ce,
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {value} at step {} (batch digest {})",
                    self.step + 1,
                    batch_digest(micro)
                )));
            }
            loss_sum += ce_value;
            tape.backward(loss)?;
            let grads = tape.param_grads();
            drop(tape);
            self.model.store.accumulate(grads);
        }
        Ok(loss_sum)
    }

    /// One optimizer update; returns the step's training loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let micro = self.draw_batch();
        let loss = self.accumulate(&micro)?;
        let lr = lr_schedule(self.step + 1, self.config.lr_max, self.config.warmup_steps);
        self.adam.step(&mut self.model.store, lr)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn validation_accuracy(&self) -> Result<Vec<Option<f64>>> {
        self.schema
            .ids()
            .map(|d| match self.validation.get(d.0) {
                Some(v) => teacher_forced_accuracy(&self.model, self.schema, v),
                None => Ok(None),
            })
            .collect()
    }

    /// Trains until `max_steps`, logging metrics and writing the checkpoint
    /// every `eval_every` steps and at the end.
    pub fn run(&mut self) -> Result<TrainReport> {
        let mut losses = Vec::new();
        let mut metrics = Vec::new();
        while self.step < self.config.max_steps {
            let loss = self.train_step()?;
            losses.push(loss);
            let boundary = self.config.eval_every > 0 && self.step % self.config.eval_every == 0;
            if boundary || self.step == self.config.max_steps {
                metrics.push(MetricRow {
                    step: self.step,
                    lr: lr_schedule(self.step, self.config.lr_max, self.config.warmup_steps),
                    loss,
                    accuracy: self.validation_accuracy()?,
                });
                if let Some(path) = &self.config.checkpoint_path {
                    self.checkpoint().write(path)?;
                }
            }
        }
        let checkpoint = self.checkpoint();
        if let Some(path) = &self.config.checkpoint_path {
            checkpoint.write(path)?;
        }
        Ok(TrainReport {
            losses,
            metrics,
            checkpoint,
        })
    }

    /// Parameters, optimizer moments, step and stream position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut blobs = self.model.param_blobs();
        for ((_, p), st) in self.model.store.iter().zip(&self.adam.moments) {
            let shape = p.value.shape().to_vec();
            blobs.push(Blob {
                name: format!("adam.m.{}", p.name),
                shape: shape.clone(),
                data: st.m.clone(),
            });
            blobs.push(Blob {
                name: format!("adam.v.{}", p.name),
                shape,
                data: st.v.clone(),
            });
        }
        Checkpoint {
            config: self.config_echo.clone(),
            schema_hash: self.model.schema_hash.clone(),
            step: self.step,
            stream: self.stream.state(),
            blobs,
        }
    }

    /// Restores everything [`Trainer::checkpoint`] saved.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut moments = Vec::with_capacity(self.adam.moments.len());
        for (_, p) in self.model.store.iter() {
            let get = |kind: &str| -> Result<Vec<f64>> {
                let name = format!("adam.{kind}.{}", p.name);
                match ck.blob(&name) {
                    Some(b) if b.shape == p.value.shape() => Ok(b.data.clone()),
                    Some(_) => Err(Error::Compat(format!("optimizer state `{name}` has the wrong shape"))),
                    None => Err(Error::Compat(format!("optimizer state `{name}` missing from checkpoint"))),
                }
            };
            moments.push(crate::train::Moments { m: get("m")?, v: get("v")? });
        }
        self.model.load_params(ck)?;
        self.adam.moments = moments;
        self.adam.t = ck.step;
        self.step = ck.step;
        self.stream.restore(ck.stream);
        Ok(())
    }

    /// Current parameter values, for comparisons.
    pub fn param_values(&self) -> Vec<Tensor> {
        self.model.store.iter().map(|(_, p)| p.value.clone()).collect()
    }
}
