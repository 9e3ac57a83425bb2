use crate::error::{Error, Result};
use crate::nn::Init;
use crate::numerics::{ParamId, Tape, Var};

/// Position-wise feed-forward block `W2·relu(W1·x + b1) + b2`.
/// Experts of a sparse layer are instances of this type.
#[derive(Clone, Debug)]
pub struct FfnLayer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_model: usize,
    pub d_ff: usize,
}

impl FfnLayer {
    pub fn new(init: &mut Init<'_>, prefix: &str, d_model: usize, d_ff: usize) -> Self {
        FfnLayer {
            w1: init.xavier(&format!("{prefix}.w1"), d_model, d_ff),
            b1: init.zeros_param(&format!("{prefix}.b1"), &[d_ff]),
            w2: init.xavier(&format!("{prefix}.w2"), d_ff, d_model),
            b2: init.zeros_param(&format!("{prefix}.b2"), &[d_model]),
            d_model,
            d_ff,
        }
    }

    pub fn num_params(d_model: usize, d_ff: usize) -> usize {
        2 * d_model * d_ff + d_ff + d_model
    }

    /// Applies the block to every row of `x` (`[T × d_model]`).
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.d_model {
            return Err(Error::dim(format!(
                "feed-forward input width {width}, expected {}",
                self.d_model
            )));
        }
        let (w1, b1, w2, b2) = (tape.param(self.w1), tape.param(self.b1), tape.param(self.w2), tape.param(self.b2));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h)?;
        let y = tape.matmul(h, w2)?;
        tape.add_bias(y, b2)
    }
}
