//! Central finite-difference oracle for checking tape gradients.
//!
//! The oracle only evaluates the forward pass, so it is independent of the
//! backward rules it is used to check.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    /// Largest `|analytic - numeric| / max(1e-4·|numeric|, 1e-6)`; `<= 1` passes.
    pub worst_ratio: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Evaluates `f` on fresh tapes and returns the scalar loss.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// Central differences of `f` with respect to every entry of every input.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut out = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[which].shape().to_vec());
        for i in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= step;
            let d = (eval_scalar(f, &plus)? - eval_scalar(f, &minus)?) / (2.0 * step);
            grad.data_mut()[i] = d;
        }
        out.push(grad);
    }
    Ok(out)
}

/// Analytic gradients from one backward pass.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad").clone())
        .collect())
}

/// Compares analytic gradients to central differences with tolerance
/// `max(1e-4·|g|, 1e-6)` per entry.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, step)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_abs_error: 0.0,
        worst_ratio: 0.0,
    };
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let err = (av - nv).abs();
            let tol = (1e-4 * nv.abs()).max(1e-6);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(err);
            report.worst_ratio = report.worst_ratio.max(err / tol);
        }
    }
    Ok(report)
}
