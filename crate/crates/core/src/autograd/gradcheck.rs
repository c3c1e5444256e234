//! Central finite-difference verification of the backward pass.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Per-input worst relative errors, plus the overall maximum.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Evaluate `f` once and return its scalar output at f64 precision.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar_f64(out))
}

/// Compare the backward pass of the scalar function `f` against central
/// finite differences with step `h` on every element of every input.
///
/// The reported error for an input tensor is the worst elementwise
/// deviation `|analytic − numeric|` measured relative to the largest
/// gradient magnitude seen in that tensor (analytic or numeric). Gradients
/// that are identically zero on both sides count as exact.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic gradients from one taped evaluation.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();
    drop(tape);

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0f64; grad.len()];
        for ei in 0..grad.len() {
            let orig = work[ti].data[ei];
            // The realized step differs from h because the perturbed value
            // rounds to f32; divide by the step that actually happened.
            let xp = orig + h as f32;
            let xm = orig - h as f32;
            work[ti].data[ei] = xp;
            let fp = eval_scalar(&f, &work)?;
            work[ti].data[ei] = xm;
            let fm = eval_scalar(&f, &work)?;
            work[ti].data[ei] = orig;
            numeric[ei] = (fp - fm) / (xp as f64 - xm as f64);
        }
        let mut scale = 0.0f64;
        for (&a, &n) in grad.iter().zip(numeric.iter()) {
            scale = scale.max((a as f64).abs()).max(n.abs());
        }
        let err = if scale < 1.0e-12 {
            0.0
        } else {
            grad.iter()
                .zip(numeric.iter())
                .map(|(&a, &n)| (a as f64 - n).abs() / scale)
                .fold(0.0f64, f64::max)
        };
        per_input.push(err);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0f64, f64::max);
    Ok(GradCheckReport { max_rel_err, per_input })
}
