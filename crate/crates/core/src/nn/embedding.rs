use crate::error::{Error, Result};
use crate::nn::Init;
use crate::numerics::{ParamId, Tape, Tensor, Var};

/// Sinusoidal position table `[len × d_model]`:
/// even columns `sin(pos / 10000^(2i/d))`, odd columns the matching cosine.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let a = pos as f64 / rate;
            data[pos * d_model + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![len, d_model], data).expect("shape product")
}

/// Token embedding table scaled by `sqrt(d_model)` on lookup.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub d_model: usize,
}

impl Embedding {
    pub fn new(init: &mut Init<'_>, name: &str, vocab: usize, d_model: usize) -> Self {
        let table = init.normal(name, &[vocab, d_model], (d_model as f64).powf(-0.5));
        Embedding { table, vocab, d_model }
    }

    /// Looks up `ids` and adds the position row `positions[i]` to each.
    pub fn forward(&self, tape: &mut Tape<'_>, ids: &[usize], positions: &[usize]) -> Result<Var> {
        if ids.len() != positions.len() {
            return Err(Error::dim(format!("{} ids with {} positions", ids.len(), positions.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::data(format!("token {bad} outside vocabulary of {}", self.vocab)));
        }
        let table = tape.param(self.table);
        let e = tape.gather_rows(table, ids)?;
        let e = tape.scale(e, (self.d_model as f64).sqrt())?;
        let max_pos = positions.iter().copied().max().map_or(0, |p| p + 1);
        let pe = sinusoidal_positions(max_pos, self.d_model);
        let mut rows = Vec::with_capacity(ids.len() * self.d_model);
        for &p in positions {
            rows.extend_from_slice(pe.row(p));
        }
        let pe = tape.constant(Tensor::new(vec![ids.len(), self.d_model], rows)?);
        tape.add(e, pe)
    }
}
