use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::domain::DomainId;
use crate::error::{Error, Result};

pub const TRACE_CSV_HEADER: &str = "layer,example,position,domain,expert_rank,expert_id,weight";
const TRACE_MAGIC: &[u8; 8] = b"MOETRACE";
const TRACE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Routing record of one token at one sparse layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Sparse-layer index: encoder layers first, then decoder layers.
    pub layer: usize,
    /// Row of the batch the token belongs to.
    pub example: usize,
    /// Token position within its sequence.
    pub position: usize,
    /// Label in effect for the token's routing.
    pub domain: DomainId,
    /// Full gate distribution over the experts.
    pub probs: Vec<f64>,
    /// Selected experts, highest weight first.
    pub experts: Vec<usize>,
    /// Renormalized weights aligned with `experts`.
    pub weights: Vec<f64>,
}

/// Gate records of a forward pass (or of many, merged).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub experts: usize,
    pub k: usize,
    /// Stack of each sparse layer, indexed by `TraceEntry::layer`.
    pub layers: Vec<Stack>,
    pub entries: Vec<TraceEntry>,
}

impl GateTrace {
    pub fn new(experts: usize, k: usize, layers: Vec<Stack>) -> Self {
        GateTrace {
            experts,
            k,
            layers,
            entries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Appends `other`'s entries, renumbering examples after this trace's.
    pub fn extend(&mut self, other: GateTrace) {
        let offset = self.entries.iter().map(|e| e.example + 1).max().unwrap_or(0);
        if self.layers.is_empty() {
            self.experts = other.experts;
            self.k = other.k;
            self.layers = other.layers;
        }
        self.entries.extend(other.entries.into_iter().map(|mut e| {
            e.example += offset;
            e
        }));
    }

    /// Deterministic order: by layer, then example, then position.
    pub fn sort(&mut self) {
        self.entries.sort_by_key(|e| (e.layer, e.example, e.position));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            for (rank, (x, w)) in e.experts.iter().zip(&e.weights).enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    e.layer, e.example, e.position, e.domain, rank, x, w
                ));
            }
        }
        out
    }

    /// Little-endian binary form: magic, version, `N`, `k`, layer stacks,
    /// entry count, then per entry the indices as `u32` followed by the
    /// distribution, experts (`u32`) and weights (`f64`).
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TRACE_MAGIC)?;
        for v in [TRACE_VERSION, self.experts as u32, self.k as u32, self.layers.len() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in &self.layers {
            w.write_all(&[matches!(s, Stack::Decoder) as u8])?;
        }
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            for v in [e.layer, e.example, e.position, e.domain.0] {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
            for p in &e.probs {
                w.write_all(&p.to_le_bytes())?;
            }
            for x in &e.experts {
                w.write_all(&(*x as u32).to_le_bytes())?;
            }
            for v in &e.weights {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let bad = |what: &str| Error::data(format!("gate trace: {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != TRACE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32s = |r: &mut R| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32s(&mut r)?;
        if version != TRACE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let experts = u32s(&mut r)? as usize;
        let k = u32s(&mut r)? as usize;
        let nlayers = u32s(&mut r)? as usize;
        let mut layers = Vec::with_capacity(nlayers);
        for _ in 0..nlayers {
            let mut b = [0u8; 1];
            r.read_exact(&mut b).map_err(|_| bad("truncated layers"))?;
            layers.push(if b[0] == 0 { Stack::Encoder } else { Stack::Decoder });
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated count"))?;
        let count = u64::from_le_bytes(b8) as usize;
        let f64s = |r: &mut R, n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b).map_err(|_| bad("truncated entry"))?;
                    Ok(f64::from_le_bytes(b))
                })
                .collect()
        };
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let layer = u32s(&mut r)? as usize;
            let example = u32s(&mut r)? as usize;
            let position = u32s(&mut r)? as usize;
            let domain = DomainId(u32s(&mut r)? as usize);
            let probs = f64s(&mut r, experts)?;
            let sel = (0..k).map(|_| u32s(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let weights = f64s(&mut r, k)?;
            entries.push(TraceEntry {
                layer,
                example,
                position,
                domain,
                probs,
                experts: sel,
                weights,
            });
        }
        Ok(GateTrace {
            experts,
            k,
            layers,
            entries,
        })
    }
}
