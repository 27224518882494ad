//! Central-difference gradient checking in double precision.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every input entry.
    pub max_rel_error: f64,
    /// Input position and flat entry where the maximum occurred.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::contract(
            "grad_check",
            format!("function output must be scalar, got {:?}", v.shape()),
        ));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the given `step`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::contract("grad_check", format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::contract(
            "grad_check",
            format!("function output must be scalar, got {:?}", g.shape(out)),
        ));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[ti].data_mut()[e] = orig + step;
            let plus = eval(&f, &probe)?;
            probe[ti].data_mut()[e] = orig - step;
            let minus = eval(&f, &probe)?;
            probe[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[ti].data()[e] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (ti, e);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

pub mod cases;
