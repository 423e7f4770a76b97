//! Central finite-difference utilities used to verify the hand-written
//! backward passes. These evaluate the model through its public forward path
//! only, independent of any analytic gradient code.

use crate::nn::param::Parameterized;
use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::collections::BTreeMap;

/// Numeric gradient of `loss` w.r.t. every parameter of `model`, by central
/// differences with step `h`.
pub fn numeric_param_grads<F, M>(
    model: &mut M,
    mut loss: impl FnMut(&mut M) -> F,
    h: f64,
) -> BTreeMap<String, ArrayD<f64>>
where
    F: Scalar,
    M: Parameterized<F>,
{
    let names = param_names(model);
    let mut out = BTreeMap::new();
    for name in names {
        let len = with_param(model, &name, |p| p.value.len());
        let mut g = Vec::with_capacity(len);
        for idx in 0..len {
            let orig = with_param(model, &name, |p| p.value.as_slice_mut().unwrap()[idx]);
            with_param(model, &name, |p| {
                p.value.as_slice_mut().unwrap()[idx] = orig + F::from_f64c(h);
            });
            let up = loss(model).to_f64c();
            with_param(model, &name, |p| {
                p.value.as_slice_mut().unwrap()[idx] = orig - F::from_f64c(h);
            });
            let down = loss(model).to_f64c();
            with_param(model, &name, |p| {
                p.value.as_slice_mut().unwrap()[idx] = orig;
            });
            g.push((up - down) / (2.0 * h));
        }
        let dim = with_param(model, &name, |p| p.value.raw_dim());
        out.insert(name, ArrayD::from_shape_vec(dim, g).unwrap());
    }
    out
}

/// Analytic gradients currently accumulated in the model, keyed by name.
pub fn analytic_param_grads<F, M>(model: &mut M) -> BTreeMap<String, ArrayD<f64>>
where
    F: Scalar,
    M: Parameterized<F>,
{
    let mut out = BTreeMap::new();
    model.visit_params("", &mut |name, p| {
        out.insert(name, p.grad.mapv(|v| v.to_f64c()));
    });
    out
}

/// Largest element-wise relative error between two gradient sets.
/// Elements where both magnitudes are below `floor` are ignored.
pub fn max_rel_error(
    analytic: &BTreeMap<String, ArrayD<f64>>,
    numeric: &BTreeMap<String, ArrayD<f64>>,
    floor: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic {
        let n = numeric
            .get(name)
            .unwrap_or_else(|| panic!("missing numeric grad for {name}"));
        for (&av, &nv) in a.iter().zip(n.iter()) {
            let scale = av.abs().max(nv.abs());
            if scale < floor {
                continue;
            }
            worst = worst.max((av - nv).abs() / scale);
        }
    }
    worst
}

/// Numeric gradient of `loss(x)` w.r.t. a flat input vector.
pub fn numeric_input_grad<F: Scalar>(
    x: &mut [F],
    mut loss: impl FnMut(&[F]) -> F,
    h: f64,
) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + F::from_f64c(h);
        let up = loss(x).to_f64c();
        x[i] = orig - F::from_f64c(h);
        let down = loss(x).to_f64c();
        x[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    g
}

pub fn max_rel_error_flat(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (&av, &nv) in analytic.iter().zip(numeric.iter()) {
        let scale = av.abs().max(nv.abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((av - nv).abs() / scale);
    }
    worst
}

fn param_names<F: Scalar, M: Parameterized<F>>(model: &mut M) -> Vec<String> {
    let mut names = Vec::new();
    model.visit_params("", &mut |name, _| names.push(name));
    names
}

fn with_param<F, M, T>(model: &mut M, target: &str, mut f: impl FnMut(&mut crate::nn::Param<F>) -> T) -> T
where
    F: Scalar,
    M: Parameterized<F>,
{
    let mut out = None;
    model.visit_params("", &mut |name, p| {
        if name == target {
            out = Some(f(p));
        }
    });
    out.expect("parameter name not found")
}
