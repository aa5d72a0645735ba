use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Largest relative error between the reverse-mode gradient of the scalar `f`
/// at `x` and central differences with the given step.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; every entry of every input is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(xs[which].rows(), xs[which].cols()));
        for k in 0..xs[which].data().len() {
            let orig = xs[which].data()[k];
            probe[which].data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe[which].data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}
