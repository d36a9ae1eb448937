//! Central-difference gradient checking.
//!
//! Error metric per coordinate: `|a - n| / max(|a|, |n|, 1e-8)`; a check
//! reports the maximum over coordinates.

use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

const MAX_SHRINKS: usize = 12;

/// Fourth-order central differences for every coordinate:
/// `(8 (f(x + h) - f(x - h)) - (f(x + 2h) - f(x - 2h))) / 12 h` with `h = eps`.
pub fn central_differences<F>(point: &[f64], eps: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    piecewise_differences(point, eps, |x| Ok((f(x)?, 0)))
}

/// [`central_differences`] for a piecewise-smooth `f` that also reports
/// which piece it evaluated (see [`Graph::switch_pattern`]). Whenever a
/// stencil point lands on a different piece than `point` the step shrinks
/// fourfold, so no difference straddles a ReLU or max-pool switch.
pub fn piecewise_differences<F>(point: &[f64], eps: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<(f64, u64)>,
{
    let mut x = point.to_vec();
    let (_, piece) = f(&x)?;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let mut h = eps;
        let mut estimate = 0.0;
        for _ in 0..=MAX_SHRINKS {
            let mut same = true;
            let mut at = |offset: f64| -> Result<f64> {
                x[i] = orig + offset;
                let (v, p) = f(&x)?;
                same &= p == piece;
                Ok(v)
            };
            let near = at(h)? - at(-h)?;
            let far = at(2.0 * h)? - at(-2.0 * h)?;
            estimate = (8.0 * near - far) / (12.0 * h);
            if same {
                break;
            }
            h /= 4.0;
        }
        x[i] = orig;
        out.push(estimate);
    }
    Ok(out)
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> Result<T> {
    g.value(v)
        .item()
        .ok_or_else(|| Error::Usage(alloc::format!("checked function returned shape {:?}", g.shape(v))))
}

fn analytic_input_grad<T, F>(f: &mut F, point: &Tensor<T>) -> Result<Vec<f64>>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    Ok(match grads.wrt(x) {
        Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
        None => alloc::vec![0.0; point.numel()],
    })
}

fn numeric_input_grad<T, F>(f: &mut F, point: &Tensor<T>, eps: f64) -> Result<Vec<f64>>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let base: Vec<f64> = point.data().iter().map(|v| v.as_f64()).collect();
    piecewise_differences(&base, eps, |xs| {
        let t = Tensor::new(point.shape(), xs.iter().map(|&v| T::lit(v)).collect())?;
        let mut g = Graph::new();
        let x = g.input(t);
        let y = f(&mut g, x)?;
        Ok((scalar_of(&g, y)?.as_f64(), g.switch_pattern()))
    })
}

/// Checks the gradient of `f` with respect to its tensor argument at `point`.
/// `f` receives a fresh graph and the bound input and returns a scalar node.
pub fn finite_difference_check<T, F>(mut f: F, point: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let analytic = analytic_input_grad(&mut f, point)?;
    let numeric = numeric_input_grad(&mut f, point, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Gradient of the `f32` program against central differences of the same
/// program run in `f64`. Differencing in `f32` itself loses most digits to
/// rounding, so the reference is taken in the wider type.
pub fn mixed_precision_check<F32, F64>(mut f32_fn: F32, mut f64_fn: F64, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F32: FnMut(&mut Graph<f32>, Var) -> Result<Var>,
    F64: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let analytic = analytic_input_grad(&mut f32_fn, &point.cast::<f32>())?;
    let numeric = numeric_input_grad(&mut f64_fn, point, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Analytic parameter gradients of `f` (summed over every binding).
pub fn analytic_param_grads<T, F>(store: &ParamStore<T>, f: &mut F) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    let grads = g.backward(y)?;
    Ok(store
        .iter()
        .map(|(id, p)| match grads.param(id) {
            Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
            None => alloc::vec![0.0; p.value.numel()],
        })
        .collect())
}

/// Numeric parameter gradients of `f`, one central difference per scalar.
pub fn numeric_param_grads<T, F>(store: &ParamStore<T>, eps: f64, f: &mut F) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut work = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let base: Vec<f64> = store.value(id).data().iter().map(|v| v.as_f64()).collect();
        let mut eval = |xs: &[f64]| -> Result<(f64, u64)> {
            for (dst, &v) in work.get_mut(id).value.data_mut().iter_mut().zip(xs) {
                *dst = T::lit(v);
            }
            let mut g = Graph::new();
            let y = f(&mut g, &work)?;
            Ok((scalar_of(&g, y)?.as_f64(), g.switch_pattern()))
        };
        let col = piecewise_differences(&base, eps, &mut eval)?;
        work.get_mut(id).value = store.value(id).clone();
        out.push(col);
    }
    Ok(out)
}

pub fn compare_param_grads<T: Scalar>(store: &ParamStore<T>, analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport { max_error: 0.0, worst: None, coordinates: 0 };
    for (((_, p), a), n) in store.iter().zip(analytic).zip(numeric) {
        for (i, (&av, &nv)) in a.iter().zip(n).enumerate() {
            report.coordinates += 1;
            let e = relative_error(av, nv);
            if e > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(e);
                report.worst = Some((p.name.clone(), i));
            }
        }
    }
    report
}

/// Gradient check over every scalar of every registered parameter.
pub fn param_gradient_check<T, F>(store: &ParamStore<T>, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let analytic = analytic_param_grads(store, &mut f)?;
    let numeric = numeric_param_grads(store, eps, &mut f)?;
    Ok(compare_param_grads(store, &analytic, &numeric))
}

/// Parameter gradients of an `f32` program against central differences of
/// its `f64` twin over the cast store.
pub fn mixed_param_check<F32, F64>(store: &ParamStore<f32>, eps: f64, mut f32_fn: F32, mut f64_fn: F64) -> Result<GradCheckReport>
where
    F32: FnMut(&mut Graph<f32>, &ParamStore<f32>) -> Result<Var>,
    F64: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let analytic = analytic_param_grads(store, &mut f32_fn)?;
    let numeric = numeric_param_grads(&store.cast::<f64>(), eps, &mut f64_fn)?;
    Ok(compare_param_grads(store, &analytic, &numeric))
}
