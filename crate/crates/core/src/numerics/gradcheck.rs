use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest relative error
/// `|analytic − numeric| / (|analytic| + |numeric| + eps)`.
///
/// `f` must be smooth at `x` within `eps`: callers probing top-k routing or
/// rectifiers must pick points away from ties and kinks, this function does
/// not detect them.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    run(None, f, x, eps)
}

/// [`grad_check`] on a tape that can read parameters from `store`.
pub fn grad_check_with<F>(store: &ParamStore, f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    run(Some(store), f, x, eps)
}

/// [`grad_check`] with respect to one stored parameter: `f` builds the loss
/// from a tape over `store` on which `id` is bound to the probed value.
pub fn grad_check_param<F>(store: &ParamStore, id: ParamId, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let x = store.get(id).value.clone();
    run(
        Some(store),
        |t, v| {
            t.bind_param(id, v);
            f(t)
        },
        &x,
        eps,
    )
}

fn run<F>(store: Option<&ParamStore>, f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let new_tape = || match store {
        Some(s) => Tape::with_store(s),
        None => Tape::new(),
    };
    let mut tape = new_tape();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    check_finite(tape.value(out).item(), "analytic pass")?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = new_tape();
        let v = t.leaf(probe, false);
        let o = f(&mut t, v)?;
        let y = t.value(o).item();
        check_finite(y, "finite-difference probe")?;
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + eps);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_finite(v: f64, stage: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite value {v} during {stage}")))
    }
}
