use crate::data::Example;
use crate::domain::{DomainId, DomainSchema, Token, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Batch, Mode, Model};
use crate::moe::GateTrace;
use crate::numerics::{Tape, Var};
use crate::train::{argmax, routing_label};

/// Next-token scores for a batch of partial outputs.
pub trait StepLogits {
    /// `prefixes[b]` holds the tokens emitted so far for row `b` (no `BOS`).
    fn next_logits(&mut self, prefixes: &[Vec<Token>]) -> Result<Vec<Vec<f64>>>;
}

/// Greedy search over `rows` outputs: the argmax token (lowest id on ties)
/// is appended each step until `EOS` or `max_len` tokens. Outputs keep the
/// final `EOS` when one was produced.
pub fn greedy_search<S: StepLogits>(scorer: &mut S, rows: usize, max_len: usize) -> Result<Vec<Vec<Token>>> {
    greedy_search_limits(scorer, &vec![max_len; rows])
}

/// [`greedy_search`] with a length limit per row.
pub fn greedy_search_limits<S: StepLogits>(scorer: &mut S, max_lens: &[usize]) -> Result<Vec<Vec<Token>>> {
    if max_lens.contains(&0) {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let rows = max_lens.len();
    let mut out = vec![Vec::new(); rows];
    let mut done = vec![false; rows];
    for step in 0..max_lens.iter().copied().max().unwrap_or(0) {
        for (b, &m) in max_lens.iter().enumerate() {
            done[b] |= step >= m;
        }
        if done.iter().all(|&d| d) {
            break;
        }
        let logits = scorer.next_logits(&out)?;
        for (b, row) in logits.iter().enumerate() {
            if done[b] {
                continue;
            }
            let t = argmax(row) as Token;
            out[b].push(t);
            done[b] = t == EOS;
        }
    }
    Ok(out)
}

/// Scores prefixes with a model, encoding the sources once.
pub struct ModelScorer<'m> {
    model: &'m Model,
    tape: Tape<'m>,
    batch: Batch,
    enc: Var,
}

impl<'m> ModelScorer<'m> {
    /// `sources` must already be prepared (tagged if the model uses tags).
    pub fn new(model: &'m Model, sources: &[Vec<Token>], labels: &[DomainId]) -> Result<Self> {
        let targets = vec![vec![EOS]; sources.len()];
        let batch = Batch::new(sources, &targets, labels)?;
        let mut tape = Tape::inference(&model.store);
        let enc = model.encode(&mut tape, &batch)?;
        Ok(ModelScorer { model, tape, batch, enc })
    }
}

impl StepLogits for ModelScorer<'_> {
    fn next_logits(&mut self, prefixes: &[Vec<Token>]) -> Result<Vec<Vec<f64>>> {
        let t = 1 + prefixes.iter().map(Vec::len).max().unwrap_or(0);
        let mut tgt_in = vec![PAD; prefixes.len() * t];
        for (b, p) in prefixes.iter().enumerate() {
            tgt_in[b * t] = BOS;
            tgt_in[b * t + 1..b * t + 1 + p.len()].copy_from_slice(p);
        }
        let logits = self.model.decode(&mut self.tape, self.enc, &self.batch, &tgt_in, t)?;
        let l = self.tape.value(logits);
        Ok(prefixes.iter().enumerate().map(|(b, p)| l.row(b * t + p.len()).to_vec()).collect())
    }
}

/// Greedy decoding of one source under label `d`. `source` is the raw
/// source; the tag is inserted here when the model conditions on tags.
pub fn greedy_decode(model: &Model, schema: &DomainSchema, source: &[Token], d: DomainId, max_len: usize) -> Result<Vec<Token>> {
    let prepared = model.prepare_source(source, d, schema)?;
    let mut scorer = ModelScorer::new(model, &[prepared], &[d])?;
    Ok(greedy_search(&mut scorer, 1, max_len)?.remove(0))
}

/// Hypotheses for a test set, with the gate trace of the decoded outputs
/// for sparse models.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub hypotheses: Vec<Vec<Token>>,
    pub trace: Option<GateTrace>,
}

/// Decodes `examples` in batches under `label` (or each example's own
/// routing label when `None`), allowing each output one token more than its
/// prepared source. The trace comes from a teacher-forced pass over the decoded
/// outputs, which routes exactly as the incremental decode did.
pub fn decode_examples(model: &Model, schema: &DomainSchema, examples: &[Example], label: Option<DomainId>) -> Result<Decoded> {
    let mut hypotheses = Vec::with_capacity(examples.len());
    let mut trace: Option<GateTrace> = None;
    for chunk in examples.chunks(64) {
        let labels: Vec<DomainId> = chunk
            .iter()
            .map(|e| label.unwrap_or_else(|| routing_label(model, e.assigned_domain)))
            .collect();
        let sources = chunk
            .iter()
            .zip(&labels)
            .map(|(e, &d)| model.prepare_source(&e.source, d, schema))
            .collect::<Result<Vec<_>>>()?;
        let limits: Vec<usize> = sources.iter().map(|s| s.len() + 1).collect();
        let mut scorer = ModelScorer::new(model, &sources, &labels)?;
        let hyps = greedy_search_limits(&mut scorer, &limits)?;
        let batch = Batch::new(&sources, &hyps, &labels)?;
        let mut tape = Tape::inference(&model.store);
        if let Some(t) = model.forward(&mut tape, &batch, Mode::Infer)?.trace {
            match trace.as_mut() {
                Some(all) => all.extend(t),
                None => trace = Some(t),
            }
        }
        hypotheses.extend(hyps);
    }
    Ok(Decoded { hypotheses, trace })
}
