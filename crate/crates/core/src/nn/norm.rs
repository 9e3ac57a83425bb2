use crate::error::Result;
use crate::nn::Init;
use crate::numerics::{ParamId, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, prefix: &str, d_model: usize) -> Self {
        LayerNorm {
            gamma: init.ones_param(&format!("{prefix}.gamma"), &[d_model]),
            beta: init.zeros_param(&format!("{prefix}.beta"), &[d_model]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn num_params(d_model: usize) -> usize {
        2 * d_model
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, self.eps)
    }
}
