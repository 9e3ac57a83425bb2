use crate::error::{Error, Result};
use crate::nn::Init;
use crate::numerics::{AttnMask, ParamId, Tape, Var};

/// Multi-head attention with biased query, key, value and output projections.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionLayer {
    pub fn new(init: &mut Init<'_>, prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide d_model {d_model}")));
        }
        let mut proj = |name: &str| {
            (
                init.xavier(&format!("{prefix}.w{name}"), d_model, d_model),
                init.zeros_param(&format!("{prefix}.b{name}"), &[d_model]),
            )
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        Ok(AttentionLayer {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads,
            d_model,
        })
    }

    pub fn num_params(d_model: usize) -> usize {
        4 * (d_model * d_model + d_model)
    }

    fn project(&self, tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    /// Projects `queries` (`[B·Tq × d]`), `keys` and `values` (`[B·Tk × d]`),
    /// attends per head under `mask`, and applies the output projection.
    pub fn forward(&self, tape: &mut Tape<'_>, queries: Var, keys: Var, values: Var, mask: &AttnMask) -> Result<Var> {
        for v in [queries, keys, values] {
            let w = tape.value(v).cols();
            if w != self.d_model {
                return Err(Error::dim(format!("attention input width {w}, expected {}", self.d_model)));
            }
        }
        let q = self.project(tape, queries, self.wq, self.bq)?;
        let k = self.project(tape, keys, self.wk, self.bk)?;
        let v = self.project(tape, values, self.wv, self.bv)?;
        let o = tape.attention(q, k, v, self.heads, mask)?;
        self.project(tape, o, self.wo, self.bo)
    }
}
