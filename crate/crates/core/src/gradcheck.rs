//! Central-difference verification of tape gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub pass: bool,
    /// Set when the function could not be evaluated at `x` or a perturbed point.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String) -> Self {
        Self {
            max_rel_err: f64::INFINITY,
            worst_index: 0,
            analytic_at_worst: f64::NAN,
            numeric_at_worst: f64::NAN,
            checked: 0,
            pass: false,
            failure: Some(msg),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v)?;
    let val = tape.value(out);
    if val.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check function must return a scalar, got {:?}",
            val.shape()
        )));
    }
    let s = val.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(s)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x` with
/// central differences over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, step, tol, &all)
}

/// Like [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor, step: f64, tol: f64, indices: &[usize]) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    if step.is_nan() || step <= 0.0 {
        return GradCheckReport::failed(format!("step must be positive, got {step}"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
        return GradCheckReport::failed(format!("index {bad} out of range for {} values", x.len()));
    }

    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = match f(&mut tape, v) {
            Ok(o) => o,
            Err(e) => return GradCheckReport::failed(format!("forward failed: {e}")),
        };
        if !tape.value(out).is_finite() {
            return GradCheckReport::failed("objective is not finite at x".into());
        }
        match tape.backward(out) {
            Ok(g) => g.get_or_zeros(v, x),
            Err(e) => return GradCheckReport::failed(format!("backward failed: {e}")),
        }
    };

    let numeric: Vec<Result<f64>> = indices
        .par_iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            Ok((eval(&f, plus)? - eval(&f, minus)?) / (2.0 * step))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: indices.len(),
        pass: true,
        failure: None,
    };
    for (&i, n) in indices.iter().zip(numeric) {
        let n = match n {
            Ok(n) => n,
            Err(e) => {
                return GradCheckReport::failed(format!("perturbed evaluation at {i} failed: {e}"))
            }
        };
        let a = analytic.data()[i];
        let err = relative_error(a, n);
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report.pass = report.max_rel_err <= tol;
    report
}
