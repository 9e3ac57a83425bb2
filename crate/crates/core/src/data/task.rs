use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainId, Token, EOS};
use crate::error::{Error, Result};

/// Half-open range of token ids `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRange {
    pub start: Token,
    pub end: Token,
}

impl TokenRange {
    pub fn new(start: Token, end: Token) -> Self {
        TokenRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, t: Token) -> bool {
        (self.start..self.end).contains(&t)
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        self.start..self.end
    }

    /// Splits at the midpoint; the upper half gets the extra token on odd lengths.
    pub fn halves(&self) -> (TokenRange, TokenRange) {
        let mid = self.start + (self.len() / 2) as Token;
        (TokenRange::new(self.start, mid), TokenRange::new(mid, self.end))
    }
}

/// A token-substitution transduction task.
///
/// Sources are content tokens followed by `EOS`; targets substitute every
/// content token through `map` and keep the `EOS`. When `ranges` holds more
/// than one range, each example draws from a single range chosen uniformly
/// (plus the shared range), which is how the generic corpus covers several
/// domains without mixing their vocabularies in one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTask {
    pub ranges: Vec<TokenRange>,
    pub shared: TokenRange,
    pub map: BTreeMap<Token, Token>,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
    pub true_domain: DomainId,
    pub assigned_domain: DomainId,
}

impl Example {
    /// Number of target tokens including the end token.
    pub fn target_len(&self) -> usize {
        self.target.len()
    }
}

impl DomainTask {
    pub fn new(ranges: Vec<TokenRange>, shared: TokenRange, map: BTreeMap<Token, Token>, min_len: usize, max_len: usize) -> Result<Self> {
        let task = DomainTask {
            ranges,
            shared,
            map,
            min_len,
            max_len,
        };
        task.validate()?;
        Ok(task)
    }

    fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() || self.ranges.iter().any(TokenRange::is_empty) {
            return Err(Error::config("task content range is empty"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!("length bounds [{}, {}] invalid", self.min_len, self.max_len)));
        }
        let mut domain: Vec<Token> = self.ranges.iter().flat_map(TokenRange::tokens).collect();
        domain.extend(self.shared.tokens());
        let mut sorted = domain.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("task ranges overlap"));
        }
        if self.map.len() != domain.len() || domain.iter().any(|t| !self.map.contains_key(t)) {
            return Err(Error::config("substitution map does not cover the task ranges"));
        }
        let mut image: Vec<Token> = self.map.values().copied().collect();
        image.sort_unstable();
        if image != sorted {
            return Err(Error::config("substitution map is not a bijection on the task ranges"));
        }
        Ok(())
    }

    pub fn min_token(&self) -> Token {
        self.ranges.iter().map(|r| r.start).chain([self.shared.start]).min().unwrap_or(0)
    }

    pub fn max_token(&self) -> Token {
        self.ranges
            .iter()
            .chain([&self.shared])
            .filter(|r| !r.is_empty())
            .map(|r| r.end - 1)
            .max()
            .unwrap_or(0)
    }

    pub fn apply(&self, t: Token) -> Option<Token> {
        self.map.get(&t).copied()
    }

    pub fn inverse(&self) -> BTreeMap<Token, Token> {
        self.map.iter().map(|(&a, &b)| (b, a)).collect()
    }

    pub fn in_ranges(&self, t: Token) -> bool {
        self.ranges.iter().any(|r| r.contains(t))
    }

    /// Target for a source (content tokens, optionally `EOS`-terminated).
    pub fn transduce(&self, source: &[Token]) -> Result<Vec<Token>> {
        source
            .iter()
            .map(|&t| match t {
                EOS => Ok(EOS),
                _ => self.apply(t).ok_or_else(|| Error::data(format!("token {t} outside the task ranges"))),
            })
            .collect()
    }

    fn sample_source<R: Rng>(&self, rng: &mut R) -> Vec<Token> {
        let range = self.ranges[rng.gen_range(0..self.ranges.len())];
        let (a, b) = (range.len(), self.shared.len());
        let len = rng.gen_range(self.min_len..=self.max_len);
        let mut src: Vec<Token> = (0..len)
            .map(|_| {
                let i = rng.gen_range(0..a + b);
                if i < a {
                    range.start + i as Token
                } else {
                    self.shared.start + (i - a) as Token
                }
            })
            .collect();
        src.push(EOS);
        src
    }
}

/// `n` i.i.d. examples of `domain`, deterministic in `seed`.
pub fn generate_corpus(task: &DomainTask, domain: DomainId, n: usize, seed: u64) -> Result<Vec<Example>> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let source = task.sample_source(&mut rng);
            let target = task.transduce(&source)?;
            Ok(Example {
                source,
                target,
                true_domain: domain,
                assigned_domain: domain,
            })
        })
        .collect()
}

/// Random permutation of `range` onto itself.
pub fn shuffled_map<R: Rng>(range: TokenRange, rng: &mut R) -> BTreeMap<Token, Token> {
    let mut image: Vec<Token> = range.tokens().collect();
    image.shuffle(rng);
    range.tokens().zip(image).collect()
}

/// Cyclic shift of `range` by `shift` positions (identity for a multiple of its length).
pub fn shifted_map(range: TokenRange, shift: usize) -> BTreeMap<Token, Token> {
    let n = range.len().max(1);
    range
        .tokens()
        .enumerate()
        .map(|(i, t)| (t, range.start + ((i + shift) % n) as Token))
        .collect()
}
