//! Central finite-difference checks against the tape's analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Worst coordinate found by [`gradient_check_many`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks a scalar objective of one tensor. Returns the maximum relative error.
pub fn gradient_check<F>(f: F, params: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = gradient_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(params), eps)?;
    Ok(report.max_relative_error)
}

/// Checks a scalar objective of several tensors, perturbing every coordinate
/// of every tensor in turn.
pub fn gradient_check_many<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteObjective)
        }
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let grads = g.backward(out);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        tensor: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[ti].numel());
        for (k, &a) in analytic.iter().enumerate() {
            let orig = params[ti].data()[k];
            work[ti].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            if err > report.max_relative_error {
                report = GradCheckReport {
                    max_relative_error: err,
                    tensor: ti,
                    index: k,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
