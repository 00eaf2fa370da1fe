//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub mod suite;

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

fn scalar_out<T: Scalar>(g: &Graph<'_, T>, y: Var) -> Result<f64> {
    if g.value(y).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(y)
        )));
    }
    Ok(g.value(y).item().as_f64())
}

/// Relative error metric: `|analytic - numeric| / max(1, |numeric|)`;
/// infinite when either value is not finite.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if !(analytic.is_finite() && numeric.is_finite()) {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max relative error between the analytic gradient of `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    scalar_out(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.tensor(&g, xv);

    let eval = |t: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        scalar_out(&g, y)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::lit(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::lit(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}

/// Same check, over every coordinate of the listed parameters of `store`.
pub fn grad_check_params<T, F>(store: &ParamStore<T>, ids: &[ParamId], f: F, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let coords: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.get(id).value.numel()).map(move |i| (id, i)))
        .collect();
    grad_check_coords(store, &coords, f, eps)
}

/// Same check, over selected `(parameter, flat index)` coordinates.
pub fn grad_check_coords<T, F>(store: &ParamStore<T>, coords: &[(ParamId, usize)], f: F, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    check_eps(eps)?;
    let analytic: Vec<f64> = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        scalar_out(&g, y)?;
        let grads = g.backward(y)?;
        let mut out = Vec::with_capacity(coords.len());
        for &(id, i) in coords {
            let v = g.param(id);
            let d = grads.get(v).map_or(0.0, |d| d[i].as_f64());
            out.push(d);
        }
        out
    };
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let y = f(&mut g)?;
        scalar_out(&g, y)
    };
    let mut worst = 0.0f64;
    let mut work = store.clone();
    for (k, &(id, i)) in coords.iter().enumerate() {
        let base = store.get(id).value.clone();
        if i >= base.numel() {
            return Err(Error::Bounds { index: i, len: base.numel() });
        }
        let mut t = base.clone();
        t.data_mut()[i] += T::lit(eps);
        work.set(id, t.clone())?;
        let fp = eval(&work)?;
        t.data_mut()[i] = base.data()[i] - T::lit(eps);
        work.set(id, t)?;
        let fm = eval(&work)?;
        work.set(id, base)?;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[k], numeric));
    }
    Ok(worst)
}
