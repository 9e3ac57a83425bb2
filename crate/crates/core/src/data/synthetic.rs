use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dedup_splits, generate_corpus, shifted_map, shuffled_map, DomainTask, Example, Mixture, TokenRange};
use crate::domain::{DomainInfo, DomainKind, DomainSchema, Token, FIRST_TAG};
use crate::error::{Error, Result};

/// Layout of the synthetic multi-domain task family.
///
/// Token ids after the specials and tags: the shared range `R_s` first, then
/// one range per seen domain. Domain `i` (1-based) substitutes its own range
/// through a random permutation of each half and shifts `R_s` cyclically by
/// `i`, so every seen domain disagrees with every other (and with the
/// generic identity) on every shared token. The generic corpus covers the
/// first `generic_coverage` seen ranges. With `unseen_related`, a held-out
/// domain reuses the upper half of the last seen range, which generic data
/// never covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seen_domains: usize,
    pub range_size: usize,
    pub shared_size: usize,
    pub generic_coverage: usize,
    pub unseen_related: bool,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub generic_train_size: usize,
    pub test_size: usize,
    pub valid_size: usize,
    pub mixture: Mixture,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seen_domains: 4,
            range_size: 8,
            shared_size: 8,
            generic_coverage: 2,
            unseen_related: true,
            min_len: 4,
            max_len: 10,
            train_size: 2000,
            generic_train_size: 4000,
            test_size: 200,
            valid_size: 100,
            mixture: Mixture::Balanced,
            seed: 17,
        }
    }
}

impl SyntheticConfig {
    pub fn num_labeled(&self) -> usize {
        self.seen_domains + 1
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_TAG as usize + self.num_labeled() + self.shared_size + self.seen_domains * self.range_size
    }

    pub fn shared_range(&self) -> TokenRange {
        let start = FIRST_TAG + self.num_labeled() as Token;
        TokenRange::new(start, start + self.shared_size as Token)
    }

    /// Content range of seen domain `i` (1-based).
    pub fn domain_range(&self, i: usize) -> TokenRange {
        let start = self.shared_range().end + ((i - 1) * self.range_size) as Token;
        TokenRange::new(start, start + self.range_size as Token)
    }

    /// The range held out of generic coverage and used by the unseen-related domain.
    pub fn unseen_range(&self) -> TokenRange {
        self.domain_range(self.seen_domains).halves().1
    }

    fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seen_domains == 0 {
            errs.push("seen_domains must be at least 1".to_string());
        }
        if self.range_size < 2 {
            errs.push("range_size must be at least 2".to_string());
        }
        if self.shared_size != 0 && self.shared_size <= self.seen_domains {
            errs.push(format!(
                "shared_size {} must exceed seen_domains {} so shifts stay distinct",
                self.shared_size, self.seen_domains
            ));
        }
        if self.generic_coverage == 0 || self.generic_coverage > self.seen_domains {
            errs.push(format!("generic_coverage must be in 1..={}", self.seen_domains));
        }
        if self.unseen_related && self.generic_coverage == self.seen_domains {
            errs.push("unseen_related needs a seen range outside generic coverage".to_string());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            errs.push(format!("length bounds [{}, {}] invalid", self.min_len, self.max_len));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }

    /// Corpus size per domain in schema order (unseen domains get 0).
    pub fn train_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.generic_train_size];
        sizes.extend(std::iter::repeat(self.train_size).take(self.seen_domains));
        if self.unseen_related {
            sizes.push(0);
        }
        sizes
    }

    pub fn build_schema(&self) -> Result<DomainSchema> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_5c4e);
        let shared = self.shared_range();
        let mut seen_maps = Vec::new();
        for i in 1..=self.seen_domains {
            let (lo, hi) = self.domain_range(i).halves();
            let mut map = shuffled_map(lo, &mut rng);
            map.extend(shuffled_map(hi, &mut rng));
            seen_maps.push(map);
        }
        let task = |ranges: Vec<TokenRange>, mut map: BTreeMap<Token, Token>, shift: usize| {
            map.extend(shifted_map(shared, shift));
            DomainTask::new(ranges, shared, map, self.min_len, self.max_len)
        };

        let kinds = {
            let mut k = vec![DomainKind::Generic];
            k.extend(std::iter::repeat(DomainKind::Seen).take(self.seen_domains));
            if self.unseen_related {
                k.push(DomainKind::Unseen);
            }
            k
        };
        let probs = self.mixture.probabilities(&kinds, &self.train_sizes())?;

        let mut domains = Vec::new();
        let covered: Vec<TokenRange> = (1..=self.generic_coverage).map(|i| self.domain_range(i)).collect();
        let generic_map = seen_maps[..self.generic_coverage].iter().flatten().map(|(&a, &b)| (a, b)).collect();
        domains.push(DomainInfo {
            name: "generic".into(),
            kind: DomainKind::Generic,
            tag: Some(FIRST_TAG),
            sampling_prob: probs[0],
            task: Some(task(covered, generic_map, 0)?),
        });
        for i in 1..=self.seen_domains {
            domains.push(DomainInfo {
                name: format!("d{i}"),
                kind: DomainKind::Seen,
                tag: Some(FIRST_TAG + i as Token),
                sampling_prob: probs[i],
                task: Some(task(vec![self.domain_range(i)], seen_maps[i - 1].clone(), i)?),
            });
        }
        if self.unseen_related {
            let r = self.unseen_range();
            let last = &seen_maps[self.seen_domains - 1];
            let map = r.tokens().map(|t| (t, last[&t])).collect();
            domains.push(DomainInfo {
                name: format!("d{}-related", self.seen_domains),
                kind: DomainKind::Unseen,
                tag: None,
                sampling_prob: 0.0,
                task: Some(task(vec![r], map, 0)?),
            });
        }
        DomainSchema::new(domains, self.vocab_size())
    }
}

/// Train/valid/test corpora for every domain of a synthetic schema, with
/// train and valid deduplicated against test.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<Vec<Example>>,
    pub valid: Vec<Vec<Example>>,
    pub test: Vec<Vec<Example>>,
    /// Per domain: train examples removed by deduplication.
    pub removed: Vec<usize>,
}

pub fn generate_splits(cfg: &SyntheticConfig, schema: &DomainSchema) -> Result<SyntheticData> {
    let sizes = cfg.train_sizes();
    let mut out = SyntheticData {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        removed: Vec::new(),
    };
    for d in schema.ids() {
        let task = schema.task(d)?;
        let base = cfg.seed.wrapping_mul(1_000_003).wrapping_add(d.0 as u64 * 3);
        let test = generate_corpus(task, d, cfg.test_size, base)?;
        let valid = generate_corpus(task, d, cfg.valid_size, base + 1)?;
        let train = generate_corpus(task, d, sizes[d.0], base + 2)?;
        let n = train.len();
        let train = dedup_splits(&train, &test);
        out.removed.push(n - train.len());
        out.valid.push(dedup_splits(&valid, &test));
        out.train.push(train);
        out.test.push(test);
    }
    Ok(out)
}
