use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::domain::{Token, EOS};
use crate::error::{Error, Result};

/// Hits and scored positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub hits: usize,
    pub total: usize,
}

impl Tally {
    pub fn rate(self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

/// Position-wise exact match over the reference tokens (final `EOS`
/// included) at positions where `keep(example, position)` holds. A
/// hypothesis too short to reach a position misses it.
pub fn masked_accuracy<F>(hypotheses: &[Vec<Token>], examples: &[Example], keep: F) -> Result<Tally>
where
    F: Fn(&Example, usize) -> bool,
{
    if hypotheses.len() != examples.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            examples.len()
        )));
    }
    let mut t = Tally::default();
    for (h, e) in hypotheses.iter().zip(examples) {
        for (p, r) in e.target.iter().enumerate() {
            if keep(e, p) {
                t.total += 1;
                if h.get(p) == Some(r) {
                    t.hits += 1;
                }
            }
        }
    }
    Ok(t)
}

pub fn token_accuracy(hypotheses: &[Vec<Token>], examples: &[Example]) -> Result<Tally> {
    masked_accuracy(hypotheses, examples, |_, _| true)
}

/// Fraction of hypotheses equal to their reference.
pub fn sequence_accuracy(hypotheses: &[Vec<Token>], examples: &[Example]) -> Result<Tally> {
    if hypotheses.len() != examples.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            examples.len()
        )));
    }
    Ok(Tally {
        hits: hypotheses.iter().zip(examples).filter(|(h, e)| **h == e.target).count(),
        total: examples.len(),
    })
}

/// Tokens before the first `EOS`.
pub fn content(tokens: &[Token]) -> &[Token] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

const BLEU_FLOOR: f64 = 1e-9;

/// Clipped n-gram counts for orders 1 to 4.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu_stats<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuStats> {
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::contract("BLEU needs at least one reference"));
    }
    let mut s = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        s.hyp_len += h.len();
        s.ref_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                s.totals[n - 1] += c;
                s.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
        }
    }
    Ok(s)
}

impl BleuStats {
    /// Geometric mean of the clipped precisions over the orders the
    /// hypotheses contain, zero precisions floored at 1e-9, times the
    /// brevity penalty `exp(min(0, 1 − r/c))`, scaled to 0..100.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let logs: Vec<f64> = (0..4)
            .filter(|&i| self.totals[i] > 0)
            .map(|i| (self.matches[i] as f64 / self.totals[i] as f64).max(BLEU_FLOOR).ln())
            .collect();
        let precision = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp();
        100.0 * precision * bp
    }
}

/// Corpus BLEU-4 over token sequences.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references)?.score())
}

/// Corpus BLEU of decoded outputs against example targets, both without `EOS`.
pub fn example_bleu(hypotheses: &[Vec<Token>], examples: &[Example]) -> Result<f64> {
    let h: Vec<Vec<Token>> = hypotheses.iter().map(|h| content(h).to_vec()).collect();
    let r: Vec<Vec<Token>> = examples.iter().map(|e| content(&e.target).to_vec()).collect();
    corpus_bleu(&h, &r)
}
