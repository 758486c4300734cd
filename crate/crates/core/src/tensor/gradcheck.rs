//! Finite-difference gradient oracle using the five-point central stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
//!
//! Relative error per coordinate is
//! `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)` and the checks
//! return the maximum over all checked coordinates.

use super::dense::Tensor;
use super::graph::{Graph, Var};
use super::params::ParameterStore;
use crate::error::{Error, Result};

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-12)
}

fn stencil(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let (p2, p1) = (f(x + 2.0 * h)?, f(x + h)?);
    let (m1, m2) = (f(x - h)?, f(x - 2.0 * h)?);
    // Differences first, so a locally constant `f` gives exactly zero.
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

fn eval_scalar<F>(store: &ParameterStore, f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::no_grad(store);
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    Ok(v)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(&ParameterStore::new(), f, x, h)
}

/// As [`grad_check`], with parameters available to `f` as constants.
pub fn grad_check_with<F>(store: &ParameterStore, f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    let grads = g.backward(out)?;
    let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    // Parameters must not move during the check.
    let frozen = {
        let mut s = store.clone();
        let names: Vec<String> = s.names().cloned().collect();
        for n in &names {
            s.freeze(n);
        }
        s
    };
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        let numeric = stencil(
            |v| {
                xp.data_mut()[i] = v;
                eval_scalar(&frozen, &f, &xp)
            },
            orig,
            h,
        )?;
        xp.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks the gradient of `f` with respect to every coordinate of the named
/// parameters. `f` builds the loss on a graph over the given store.
pub fn grad_check_params<F>(store: &ParameterStore, names: &[&str], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?.into_params()
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &name in names {
        let analytic = grads
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Consistency(format!("'{name}' received no gradient")))?;
        for i in 0..analytic.numel() {
            let orig = work.get(name).expect("present").data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                work.get_mut(name).expect("present").data_mut()[i] = v;
                let mut g = Graph::no_grad(&work);
                let out = f(&mut g)?;
                let val = g.value(out).item();
                if !val.is_finite() {
                    return Err(Error::Numeric("non-finite function value".into()));
                }
                Ok(val)
            };
            let numeric = stencil(&mut eval, orig, h)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
