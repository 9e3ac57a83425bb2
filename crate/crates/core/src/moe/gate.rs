use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::numerics::{ParamId, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateVariant {
    /// `softmax(W_g · x)`
    Standard,
    /// `softmax(W_g · (x ⊕ e_d))`
    DomainAware,
    /// `softmax(W_g^d · x)`, one matrix per labeled domain.
    DomainSpecialized,
}

impl GateVariant {
    pub fn name(self) -> &'static str {
        match self {
            GateVariant::Standard => "standard",
            GateVariant::DomainAware => "domain-aware",
            GateVariant::DomainSpecialized => "domain-specialized",
        }
    }
}

/// Bias-free router of one sparse layer.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub variant: GateVariant,
    /// `[d_model × N]` (standard) or `[(d_model + d_emb) × N]` (domain-aware).
    pub weight: Option<ParamId>,
    /// Per labeled domain `[d_model × N]` (domain-specialized).
    pub per_domain: Vec<ParamId>,
    /// Shared domain-embedding table `[D × d_emb]` (domain-aware).
    pub domain_embedding: Option<ParamId>,
    pub d_model: usize,
    pub d_emb: usize,
    pub experts: usize,
    pub k: usize,
    pub domains: usize,
}

impl GateParams {
    /// Creates the gate weights. `domain_embedding` must be given for the
    /// domain-aware variant and is ignored otherwise.
    pub fn new(
        init: &mut Init<'_>,
        prefix: &str,
        variant: GateVariant,
        d_model: usize,
        experts: usize,
        k: usize,
        domains: usize,
        domain_embedding: Option<(ParamId, usize)>,
    ) -> Result<Self> {
        if k == 0 || k > experts {
            return Err(Error::config(format!("top-k {k} outside 1..={experts}")));
        }
        let mut g = GateParams {
            variant,
            weight: None,
            per_domain: Vec::new(),
            domain_embedding: None,
            d_model,
            d_emb: 0,
            experts,
            k,
            domains,
        };
        match variant {
            GateVariant::Standard => g.weight = Some(init.xavier(&format!("{prefix}.w"), d_model, experts)),
            GateVariant::DomainAware => {
                let (table, d_emb) = domain_embedding
                    .ok_or_else(|| Error::config("domain-aware gate needs a domain-embedding table"))?;
                g.d_emb = d_emb;
                g.domain_embedding = Some(table);
                g.weight = Some(init.xavier(&format!("{prefix}.w"), d_model + d_emb, experts));
            }
            GateVariant::DomainSpecialized => {
                if domains == 0 {
                    return Err(Error::config("domain-specialized gate needs at least one domain"));
                }
                g.per_domain = (0..domains)
                    .map(|d| init.xavier(&format!("{prefix}.w.{d}"), d_model, experts))
                    .collect();
            }
        }
        Ok(g)
    }

    /// Scalars owned by this gate (the shared embedding table is not counted).
    pub fn num_params(variant: GateVariant, d_model: usize, d_emb: usize, experts: usize, domains: usize) -> usize {
        match variant {
            GateVariant::Standard => d_model * experts,
            GateVariant::DomainAware => (d_model + d_emb) * experts,
            GateVariant::DomainSpecialized => domains * d_model * experts,
        }
    }

    /// Multiply-accumulates of routing `tokens` rows.
    pub fn macs(&self, tokens: usize) -> u64 {
        let width = match self.variant {
            GateVariant::DomainAware => self.d_model + self.d_emb,
            _ => self.d_model,
        };
        (tokens * width * self.experts) as u64
    }

    fn check(&self, tape: &Tape<'_>, x: Var, domains: &[DomainId]) -> Result<()> {
        let t = tape.value(x);
        if t.cols() != self.d_model {
            return Err(Error::dim(format!("gate input width {}, expected {}", t.cols(), self.d_model)));
        }
        if self.variant != GateVariant::Standard {
            if domains.len() != t.rows() {
                return Err(Error::dim(format!("{} domain ids for {} rows", domains.len(), t.rows())));
            }
            if let Some(d) = domains.iter().find(|d| d.0 >= self.domains) {
                return Err(Error::lookup("gate domain", d));
            }
        }
        Ok(())
    }

    fn expect(&self, v: GateVariant) -> Result<()> {
        if self.variant == v {
            Ok(())
        } else {
            Err(Error::contract(format!("{} gate used as {}", self.variant.name(), v.name())))
        }
    }
}

/// Routing distribution `[T × N]` for the rows of `x`. The standard variant
/// ignores `domains`.
pub fn gate_distribution(tape: &mut Tape<'_>, g: &GateParams, x: Var, domains: &[DomainId]) -> Result<Var> {
    match g.variant {
        GateVariant::Standard => gate_standard(tape, g, x),
        GateVariant::DomainAware => gate_domain_aware(tape, g, x, domains),
        GateVariant::DomainSpecialized => gate_domain_specialized(tape, g, x, domains),
    }
}

pub fn gate_standard(tape: &mut Tape<'_>, g: &GateParams, x: Var) -> Result<Var> {
    g.expect(GateVariant::Standard)?;
    g.check(tape, x, &[])?;
    let w = tape.param(g.weight.expect("standard gate weight"));
    let logits = tape.matmul(x, w)?;
    tape.softmax(logits, 1)
}

pub fn gate_domain_aware(tape: &mut Tape<'_>, g: &GateParams, x: Var, domains: &[DomainId]) -> Result<Var> {
    g.expect(GateVariant::DomainAware)?;
    g.check(tape, x, domains)?;
    let table = tape.param(g.domain_embedding.expect("domain-aware embedding"));
    let ids: Vec<usize> = domains.iter().map(|d| d.0).collect();
    let e = tape.gather_rows(table, &ids)?;
    let z = tape.concat_cols(x, e)?;
    let w = tape.param(g.weight.expect("domain-aware gate weight"));
    let logits = tape.matmul(z, w)?;
    tape.softmax(logits, 1)
}

pub fn gate_domain_specialized(tape: &mut Tape<'_>, g: &GateParams, x: Var, domains: &[DomainId]) -> Result<Var> {
    g.expect(GateVariant::DomainSpecialized)?;
    g.check(tape, x, domains)?;
    let rows = tape.value(x).rows();
    let mut groups: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
    for (r, &d) in domains.iter().enumerate() {
        groups.entry(d).or_default().push(r);
    }
    let mut parts = Vec::with_capacity(groups.len());
    for (d, idx) in groups {
        let h = tape.gather_rows(x, &idx)?;
        let w = tape.param(g.per_domain[d.0]);
        parts.push((tape.matmul(h, w)?, idx));
    }
    let logits = tape.scatter_rows(parts, rows, g.experts)?;
    tape.softmax(logits, 1)
}

/// Indices of the `k` largest entries of `dist`, in descending order of
/// weight with ties going to the lower index, and the selected entries
/// divided by their sum.
pub fn top_k_select(dist: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > dist.len() {
        return Err(Error::contract(format!("top-k {k} outside 1..={}", dist.len())));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
    order.truncate(k);
    let s: f64 = order.iter().map(|&i| dist[i]).sum();
    let weights = order.iter().map(|&i| dist[i] / s).collect();
    Ok((order, weights))
}
