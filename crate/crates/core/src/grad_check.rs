//! Central-difference gradient verification.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Result of comparing reverse-mode gradients with finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Smallest denominator of [`rel_error`]. Central differences of an O(1)
/// loss carry about 1e-11 of rounding noise at `FD_STEP`, so gradients below
/// this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Relative error with denominator `max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks the gradient of a scalar function of several tensor inputs.
///
/// `f` builds the computation on a fresh graph from the given input vars and
/// returns the scalar output.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor]) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::invalid("grad_check", "function output is not scalar"));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut xs = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for k in 0..xs[t].numel() {
            let orig = xs[t].data()[k];
            xs[t].data_mut()[k] = orig + FD_STEP;
            let plus = eval(&xs)?;
            xs[t].data_mut()[k] = orig - FD_STEP;
            let minus = eval(&xs)?;
            xs[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grads[k];
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper around [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x))
}
