//! Domain identities, reserved tokens and the domain schema shared by the
//! data, model and evaluation layers.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DomainTask;
use crate::error::{Error, Result};

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
/// First id after the special tokens; domain tags start here.
pub const FIRST_TAG: Token = 3;

/// Index of a domain in its [`DomainSchema`]. The generic domain is 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainId(pub usize);

impl DomainId {
    pub const GENERIC: DomainId = DomainId(0);

    pub fn is_generic(self) -> bool {
        self == Self::GENERIC
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    Generic,
    Seen,
    /// Held out of training; decoded with the generic label.
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainInfo {
    pub name: String,
    pub kind: DomainKind,
    /// Reserved tag token; present for labeled (generic and seen) domains.
    pub tag: Option<Token>,
    pub sampling_prob: f64,
    pub task: Option<DomainTask>,
}

/// Ordered domain list: generic first, then seen domains, then unseen ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSchema {
    domains: Vec<DomainInfo>,
    vocab_size: usize,
}

impl DomainSchema {
    pub fn new(domains: Vec<DomainInfo>, vocab_size: usize) -> Result<Self> {
        let schema = DomainSchema { domains, vocab_size };
        schema.validate()?;
        Ok(schema)
    }

    /// Schema with named labeled domains and no synthetic tasks; used for
    /// architecture-only work such as cost accounting. The generic domain
    /// gets probability 0.5, the rest share the remainder evenly.
    pub fn labels_only(names: &[&str], vocab_size: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("schema needs at least the generic domain"));
        }
        let n = names.len();
        let domains = names
            .iter()
            .enumerate()
            .map(|(i, name)| DomainInfo {
                name: name.to_string(),
                kind: if i == 0 { DomainKind::Generic } else { DomainKind::Seen },
                tag: Some(FIRST_TAG + i as Token),
                sampling_prob: match (i, n) {
                    (_, 1) => 1.0,
                    (0, _) => 0.5,
                    _ => 0.5 / (n - 1) as f64,
                },
                task: None,
            })
            .collect();
        DomainSchema::new(domains, vocab_size)
    }

    fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        match self.domains.first() {
            Some(d) if d.kind == DomainKind::Generic => {}
            _ => errs.push("first domain must be the generic domain".to_string()),
        }
        let mut last = 0u8;
        for d in &self.domains {
            let rank = match d.kind {
                DomainKind::Generic => 0,
                DomainKind::Seen => 1,
                DomainKind::Unseen => 2,
            };
            if rank < last {
                errs.push(format!("domain `{}` is out of order (generic, seen, unseen)", d.name));
            }
            last = rank;
            let labeled = d.kind != DomainKind::Unseen;
            if labeled != d.tag.is_some() {
                errs.push(format!("domain `{}`: labeled domains carry a tag, unseen ones do not", d.name));
            }
            if d.kind == DomainKind::Unseen && d.sampling_prob != 0.0 {
                errs.push(format!("unseen domain `{}` has non-zero sampling probability", d.name));
            }
            if !(0.0..=1.0).contains(&d.sampling_prob) {
                errs.push(format!("domain `{}` probability {} outside [0,1]", d.name, d.sampling_prob));
            }
        }
        let total: f64 = self.domains.iter().map(|d| d.sampling_prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            errs.push(format!("sampling probabilities sum to {total}, not 1"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if let Some(tag) = d.tag {
                if tag != FIRST_TAG + i as Token {
                    errs.push(format!("domain `{}` tag {tag} is not reserved slot {}", d.name, FIRST_TAG + i as Token));
                }
                if tag as usize >= self.vocab_size {
                    errs.push(format!("tag {tag} outside vocabulary of {}", self.vocab_size));
                }
            }
            if let Some(task) = &d.task {
                if task.min_token() < self.first_content() {
                    errs.push(format!("domain `{}` content overlaps reserved tokens", d.name));
                }
                if task.max_token() as usize >= self.vocab_size {
                    errs.push(format!("domain `{}` content outside vocabulary", d.name));
                }
            }
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            errs.push("domain names must be unique".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }

    /// Sampling probability per domain, in schema order.
    pub fn sampling_probs(&self) -> Vec<f64> {
        self.domains.iter().map(|d| d.sampling_prob).collect()
    }

    pub fn domains(&self) -> &[DomainInfo] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn ids(&self) -> impl Iterator<Item = DomainId> {
        (0..self.domains.len()).map(DomainId)
    }

    /// Generic plus seen domains, i.e. those with a tag.
    pub fn num_labeled(&self) -> usize {
        self.domains.iter().filter(|d| d.tag.is_some()).count()
    }

    pub fn labeled(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.ids().filter(|d| self.domains[d.0].tag.is_some())
    }

    pub fn seen(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.ids().filter(|d| self.domains[d.0].kind == DomainKind::Seen)
    }

    pub fn unseen(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.ids().filter(|d| self.domains[d.0].kind == DomainKind::Unseen)
    }

    pub fn info(&self, d: DomainId) -> Result<&DomainInfo> {
        self.domains.get(d.0).ok_or_else(|| Error::lookup("domain", d))
    }

    pub fn name(&self, d: DomainId) -> &str {
        &self.domains[d.0].name
    }

    pub fn by_name(&self, name: &str) -> Result<DomainId> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .map(DomainId)
            .ok_or_else(|| Error::lookup("domain", name))
    }

    pub fn is_labeled(&self, d: DomainId) -> bool {
        self.domains.get(d.0).is_some_and(|i| i.tag.is_some())
    }

    pub fn tag(&self, d: DomainId) -> Result<Token> {
        self.info(d)?.tag.ok_or_else(|| Error::lookup("domain label", self.name(d)))
    }

    pub fn is_tag(&self, t: Token) -> bool {
        t >= FIRST_TAG && ((t - FIRST_TAG) as usize) < self.num_labeled()
    }

    pub fn first_content(&self) -> Token {
        FIRST_TAG + self.num_labeled() as Token
    }

    pub fn task(&self, d: DomainId) -> Result<&DomainTask> {
        self.info(d)?
            .task
            .as_ref()
            .ok_or_else(|| Error::lookup("synthetic task for domain", self.name(d)))
    }

    /// Stable content hash used to check checkpoint/data compatibility.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
