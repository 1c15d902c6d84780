//! Central finite-difference gradient checking against the tape.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordinateCheck {
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub fn relative_error(&self) -> f64 {
        let scale = 1f64.max(self.analytic.abs()).max(self.numeric.abs());
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.coordinates
            .iter()
            .map(CoordinateCheck::relative_error)
            .fold(0.0, f64::max)
    }
}

/// Compares tape gradients of a scalar function of several tensors against
/// central differences with step `eps`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..inputs[input].len() {
            let orig = inputs[input].data()[index];
            work[input].data_mut()[index] = orig + eps;
            let plus = eval(&work)?;
            work[input].data_mut()[index] = orig - eps;
            let minus = eval(&work)?;
            work[input].data_mut()[index] = orig;
            report.coordinates.push(CoordinateCheck {
                input,
                index,
                analytic: grad.data()[index],
                numeric: (plus - minus) / (2.0 * eps),
            });
        }
    }
    Ok(report)
}

/// Maximum relative gradient error of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_relative_error())
}
