//! Central finite-difference oracle for autodiff gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<Fun>(f: &Fun, params: &[Tensor<f64>]) -> Result<f64>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad(false)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {value}")));
    }
    Ok(value)
}

/// Central differences `(f(p+eps) - f(p-eps)) / 2eps` for every element of
/// every parameter.
pub fn numeric_gradient<Fun>(f: &Fun, params: &[Tensor<f64>], eps: f64) -> Result<Vec<Vec<f64>>>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..work.len() {
        let mut g = Vec::with_capacity(work[pi].len());
        for ei in 0..work[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[pi].data_mut()[ei] = orig;
            g.push((plus - minus) / (2.0 * eps));
        }
        grads.push(g);
    }
    Ok(grads)
}

/// `max |a - n| / max(|a|, |n|, 1e-8)` over all elements.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Autodiff gradients of `f` at `params`, or zeros where no path reaches a
/// parameter.
pub fn autodiff_gradient<Fun>(f: &Fun, params: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
        })
        .collect())
}

/// Compares autodiff against central differences and returns the maximum
/// relative error.
pub fn grad_check<Fun>(f: Fun, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = autodiff_gradient(&f, params)?;
    let numeric = numeric_gradient(&f, params, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}
