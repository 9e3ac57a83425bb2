use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::moe::{gate_distribution, top_k_select, GateParams};
use crate::nn::FfnLayer;
use crate::numerics::{Tape, Tensor, Var};

/// Sparse feed-forward layer: `y_t = Σ_{i ∈ top-k} Ĝ_{t,i} · E_i(x_t)`.
#[derive(Clone, Debug)]
pub struct SmoeLayer {
    pub gate: GateParams,
    pub experts: Vec<FfnLayer>,
}

/// Routing decisions of one forward call, row-major over tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Routing {
    pub experts: usize,
    pub k: usize,
    /// Full gate distribution `[T × N]`.
    pub probs: Vec<f64>,
    /// Selected experts `[T × k]`, highest weight first.
    pub selected: Vec<usize>,
    /// Renormalized weights `[T × k]`.
    pub weights: Vec<f64>,
    /// Expert feed-forward evaluations, counted per (token, expert).
    pub evaluations: usize,
}

impl Routing {
    pub fn tokens(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.selected.len() / self.k
        }
    }
}

impl SmoeLayer {
    pub fn new(gate: GateParams, experts: Vec<FfnLayer>) -> Result<Self> {
        if experts.len() != gate.experts {
            return Err(Error::config(format!(
                "gate routes over {} experts but {} were given",
                gate.experts,
                experts.len()
            )));
        }
        Ok(SmoeLayer { gate, experts })
    }

    /// Routes every row of `x` (`[T × d]`) to its top-k experts, evaluates
    /// each selected expert once on the rows assigned to it, and combines
    /// the outputs in rank order. `domains` gives the label in effect per row.
    ///
    /// Returns the output and the gate distribution node (for an optional
    /// balancing penalty) together with the routing record.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, domains: &[DomainId]) -> Result<(Var, Var, Routing)> {
        if self.experts.len() != self.gate.experts {
            return Err(Error::config(format!(
                "gate routes over {} experts but the layer holds {}",
                self.gate.experts,
                self.experts.len()
            )));
        }
        let (n, k) = (self.gate.experts, self.gate.k);
        let rows = tape.value(x).rows();
        let probs = gate_distribution(tape, &self.gate, x, domains)?;
        let pdata = tape.value(probs).data().to_vec();

        let mut selected = Vec::with_capacity(rows * k);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut slots = Vec::with_capacity(rows * k);
        for t in 0..rows {
            let (idx, _) = top_k_select(&pdata[t * n..(t + 1) * n], k)?;
            for &e in &idx {
                slots.push((e, assigned[e].len()));
                assigned[e].push(t);
            }
            selected.extend(idx);
        }
        let weights = tape.top_k_renorm(probs, &selected, k)?;

        let mut local = vec![usize::MAX; n];
        let mut outs = Vec::new();
        let mut evaluations = 0;
        for (e, rows_e) in assigned.iter().enumerate() {
            if rows_e.is_empty() {
                continue;
            }
            let h = tape.gather_rows(x, rows_e)?;
            local[e] = outs.len();
            outs.push(self.experts[e].forward(tape, h)?);
            evaluations += rows_e.len();
        }
        let slots = slots.into_iter().map(|(e, i)| (local[e], i)).collect();
        let y = if rows == 0 {
            tape.constant(Tensor::zeros(&[0, self.gate.d_model]))
        } else {
            tape.moe_combine(outs, weights, slots, k)?
        };
        let routing = Routing {
            experts: n,
            k,
            weights: tape.value(weights).data().to_vec(),
            probs: pdata,
            selected,
            evaluations,
        };
        Ok((y, probs, routing))
    }
}

/// Importance-balancing penalty `N · Σ_e I_e² / T² − 1`, the squared
/// coefficient of variation of per-expert importance `I_e = Σ_t p_{t,e}`.
pub fn balance_penalty(tape: &mut Tape<'_>, probs: Var) -> Result<Var> {
    let (t, n) = (tape.value(probs).rows(), tape.value(probs).cols());
    if t == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let ones = tape.constant(Tensor::full(&[1, t], 1.0));
    let importance = tape.matmul(ones, probs)?;
    let sq = tape.mul(importance, importance)?;
    let s = tape.sum(sq)?;
    let scaled = tape.scale(s, n as f64 / (t * t) as f64)?;
    let minus_one = tape.constant(Tensor::scalar(-1.0));
    tape.add(scaled, minus_one)
}
