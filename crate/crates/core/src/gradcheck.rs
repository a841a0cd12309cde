//! Central finite-difference verification of autodiff gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is near zero are judged on absolute error at this scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, flat coordinate) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Which coordinates of each input get perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// At most this many evenly strided coordinates per input tensor.
    Strided(usize),
}

fn coords(n: usize, coverage: Coverage) -> Vec<usize> {
    match coverage {
        Coverage::All => (0..n).collect(),
        Coverage::Strided(k) if k >= n => (0..n).collect(),
        Coverage::Strided(k) => {
            let k = k.max(1);
            (0..k).map(|i| i * n / k).collect()
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the gradient of scalar `f` at `x` against `(f(x+h) - f(x-h)) / 2h`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    gradcheck_many(
        |g, vars| f(g, vars[0]),
        core::slice::from_ref(x),
        h,
        tol,
        Coverage::All,
    )
}

/// Multi-input form of [`gradcheck`]; every input is a differentiable leaf.
pub fn gradcheck_many<F>(
    f: F,
    xs: &[Tensor],
    h: f64,
    tol: f64,
    coverage: Coverage,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let first = eval(xs)?;
    let second = eval(xs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for c in coords(xs[t].numel(), coverage) {
            let orig = xs[t].data()[c];
            work[t].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[c];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((t, c));
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
