use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::domain::{DomainId, DomainKind};
use crate::error::{Error, Result};

/// How domain sampling probabilities are derived from corpus sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixture {
    /// Generic with probability 0.5, seen domains proportional to size.
    Balanced,
    /// Every labeled domain proportional to size.
    Natural,
    SeenOnly,
    GenericOnly,
}

impl Mixture {
    pub fn name(self) -> &'static str {
        match self {
            Mixture::Balanced => "balanced",
            Mixture::Natural => "natural",
            Mixture::SeenOnly => "seen-only",
            Mixture::GenericOnly => "generic-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Mixture::Balanced),
            "natural" => Ok(Mixture::Natural),
            "seen-only" => Ok(Mixture::SeenOnly),
            "generic-only" => Ok(Mixture::GenericOnly),
            _ => Err(Error::config(format!("unknown mixture `{s}`"))),
        }
    }

    /// Probabilities in domain order; unseen domains always get 0.
    pub fn probabilities(self, kinds: &[DomainKind], sizes: &[usize]) -> Result<Vec<f64>> {
        if kinds.len() != sizes.len() {
            return Err(Error::config("one corpus size per domain required"));
        }
        let seen_total: usize = kinds.iter().zip(sizes).filter(|(k, _)| **k == DomainKind::Seen).map(|(_, s)| s).sum();
        let generic_total: usize = kinds.iter().zip(sizes).filter(|(k, _)| **k == DomainKind::Generic).map(|(_, s)| s).sum();
        let share = |weight: f64, size: usize, total: usize| {
            if total == 0 {
                0.0
            } else {
                weight * size as f64 / total as f64
            }
        };
        let (g, s) = match self {
            Mixture::Balanced if seen_total == 0 => (1.0, 0.0),
            Mixture::Balanced => (0.5, 0.5),
            Mixture::Natural => {
                let all = (seen_total + generic_total) as f64;
                (generic_total as f64 / all, seen_total as f64 / all)
            }
            Mixture::SeenOnly => (0.0, 1.0),
            Mixture::GenericOnly => (1.0, 0.0),
        };
        let probs: Vec<f64> = kinds
            .iter()
            .zip(sizes)
            .map(|(k, &n)| match k {
                DomainKind::Generic => share(g, n, generic_total),
                DomainKind::Seen => share(s, n, seen_total),
                DomainKind::Unseen => 0.0,
            })
            .collect();
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture `{}` has no data to sample", self.name())));
        }
        Ok(probs)
    }
}

/// Relabels a non-generic example as generic with probability `p`.
/// Draws from `rng` only for non-generic examples.
pub fn domain_randomize<R: Rng>(mut e: Example, p: f64, rng: &mut R) -> Example {
    if !e.true_domain.is_generic() {
        e.assigned_domain = if rng.gen::<f64>() < p {
            DomainId::GENERIC
        } else {
            e.true_domain
        };
    }
    e
}

/// Generator state sufficient to resume a stream exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Endless proportional sampler over per-domain corpora: draw a domain from
/// `probs`, draw an example uniformly with replacement, then apply domain
/// randomization with probability `dr_p`.
pub struct TrainingStream {
    corpora: Vec<Vec<Example>>,
    cumulative: Vec<f64>,
    dr_p: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl TrainingStream {
    pub fn new(corpora: Vec<Vec<Example>>, probs: &[f64], dr_p: f64, seed: u64) -> Result<Self> {
        let mut errs = Vec::new();
        if corpora.len() != probs.len() {
            errs.push(format!("{} corpora for {} probabilities", corpora.len(), probs.len()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            errs.push("probabilities must lie in [0, 1]".to_string());
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            errs.push(format!("probabilities sum to {total}, not 1"));
        }
        for (i, (c, p)) in corpora.iter().zip(probs).enumerate() {
            if *p > 0.0 && c.is_empty() {
                errs.push(format!("domain {i} has probability {p} but an empty corpus"));
            }
        }
        if !(0.0..=1.0).contains(&dr_p) {
            errs.push(format!("randomization probability {dr_p} outside [0, 1]"));
        }
        if !errs.is_empty() {
            return Err(Error::config(errs.join("; ")));
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(TrainingStream {
            corpora,
            cumulative,
            dr_p,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn num_domains(&self) -> usize {
        self.corpora.len()
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(&mut self, state: StreamState) {
        self.seed = state.seed;
        self.rng = ChaCha8Rng::seed_from_u64(state.seed);
        self.rng.set_word_pos(state.word_pos);
    }

    pub fn next_example(&mut self) -> Example {
        let u: f64 = self.rng.gen();
        let d = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        let d = if self.corpora[d].is_empty() {
            // Only reachable through rounding at the top of the cumulative sum.
            self.corpora.iter().rposition(|c| !c.is_empty()).expect("some corpus is non-empty")
        } else {
            d
        };
        let i = self.rng.gen_range(0..self.corpora[d].len());
        let e = self.corpora[d][i].clone();
        domain_randomize(e, self.dr_p, &mut self.rng)
    }
}

impl Iterator for TrainingStream {
    type Item = Example;

    fn next(&mut self) -> Option<Example> {
        Some(self.next_example())
    }
}
