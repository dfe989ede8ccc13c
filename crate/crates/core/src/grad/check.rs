//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst normwise relative error `max|analytic - numeric| / max|numeric|`
    /// over all inputs.
    pub max_rel_error: f64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Compares the tape's gradients of the scalar built by `build` with central
/// differences of step `eps`, perturbing every element of every input.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[t].numel());
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;
            g.push((up - down) / (2.0 * eps));
        }
        numeric.push(g);
    }

    let mut max_rel_error: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        let scale = n.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let err = a
            .iter()
            .zip(n)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        max_rel_error = max_rel_error.max(err / scale);
    }
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
    })
}
