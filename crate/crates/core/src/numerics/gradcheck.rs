//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn eval_sum<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).sum())
}

/// Reverse-mode gradients of `sum(f(inputs))` w.r.t. every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let loss = g.sum(out);
    let grads = g.backward(loss)?;
    let result: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    for (input, t) in result.iter().enumerate() {
        if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { input, index });
        }
    }
    Ok(result)
}

/// Central differences `(f(x+eps) − f(x−eps)) / 2eps` of `sum(f(inputs))`.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = eval_sum(f, &work)?;
            work[i].data_mut()[e] = orig - eps;
            let minus = eval_sum(f, &work)?;
            work[i].data_mut()[e] = orig;
            grad.data_mut()[e] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `max |analytic − numeric| / max(1, |numeric|)` over all elements.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Maximum relative error between reverse-mode and central finite-difference
/// gradients of `sum(f(inputs))`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, eps)?;
    Ok(compare_gradients(&analytic, &numeric))
}
