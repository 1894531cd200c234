//! Central finite differences, the oracle for every backward rule.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    Ok(value)
}

/// Central-difference gradient of the scalar objective `f` at `x`.
pub fn numeric_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    evaluate(&f, x)?;
    let mut grad = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Compares the tape gradient of `f` at `x` against central differences and
/// returns `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-12)`.
pub fn fd_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    g.backward(out)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max))
}
