use std::collections::BTreeMap;

use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::numerics::{ParamId, Tape, Var};

/// Residual bottleneck `x + Up(relu(Down(x)))`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: ParamId,
    pub down_bias: ParamId,
    pub up: ParamId,
    pub up_bias: ParamId,
}

/// One adapter per labeled domain (generic included), indexed by domain id.
#[derive(Clone, Debug)]
pub struct AdapterBank {
    pub adapters: Vec<Adapter>,
    pub d_model: usize,
    pub d_adapter: usize,
}

impl AdapterBank {
    /// Up-projections start at zero so every adapter begins as the identity.
    pub fn new(init: &mut Init<'_>, prefix: &str, domains: usize, d_model: usize, d_adapter: usize) -> Self {
        let adapters = (0..domains)
            .map(|d| Adapter {
                down: init.xavier(&format!("{prefix}.{d}.down"), d_model, d_adapter),
                down_bias: init.zeros_param(&format!("{prefix}.{d}.down_bias"), &[d_adapter]),
                up: init.zeros_param(&format!("{prefix}.{d}.up"), &[d_adapter, d_model]),
                up_bias: init.zeros_param(&format!("{prefix}.{d}.up_bias"), &[d_model]),
            })
            .collect();
        AdapterBank {
            adapters,
            d_model,
            d_adapter,
        }
    }

    pub fn params_per_domain(d_model: usize, d_adapter: usize) -> usize {
        2 * d_model * d_adapter + d_adapter + d_model
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Applies domain `d`'s adapter to every row of `x`.
    pub fn forward_domain(&self, tape: &mut Tape<'_>, x: Var, d: DomainId) -> Result<Var> {
        let rows = tape.value(x).rows();
        self.forward(tape, x, &vec![d; rows])
    }

    /// Applies, row by row, the adapter of that row's domain.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, domains: &[DomainId]) -> Result<Var> {
        let (rows, width) = (tape.value(x).rows(), tape.value(x).cols());
        if width != self.d_model {
            return Err(Error::dim(format!("adapter input width {width}, expected {}", self.d_model)));
        }
        if domains.len() != rows {
            return Err(Error::dim(format!("{} domain ids for {rows} rows", domains.len())));
        }
        let mut groups: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
        for (r, &d) in domains.iter().enumerate() {
            groups.entry(d).or_default().push(r);
        }
        let mut parts = Vec::with_capacity(groups.len());
        for (d, idx) in groups {
            let a = self.adapters.get(d.0).ok_or_else(|| Error::lookup("adapter domain", d))?;
            let h = tape.gather_rows(x, &idx)?;
            let (wd, bd, wu, bu) = (tape.param(a.down), tape.param(a.down_bias), tape.param(a.up), tape.param(a.up_bias));
            let z = tape.matmul(h, wd)?;
            let z = tape.add_bias(z, bd)?;
            let z = tape.relu(z)?;
            let z = tape.matmul(z, wu)?;
            let z = tape.add_bias(z, bu)?;
            parts.push((tape.add(h, z)?, idx));
        }
        tape.scatter_rows(parts, rows, width)
    }
}
