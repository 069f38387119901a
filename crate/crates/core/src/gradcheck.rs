//! Finite-difference checks of recorded gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::optim::Binder;
use crate::params::ParamSet;
use crate::tensor::Matrix;

/// Central differences of `f` with respect to every entry of `x`.
pub fn central_difference(x: &Matrix, step: f64, f: &mut dyn FnMut(&Matrix) -> f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let norm = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let den = norm(a) + norm(b);
    if den == 0.0 {
        0.0
    } else {
        norm(&a.sub(b)) / den
    }
}

/// Compares analytic and numeric gradients of a scalar built from `params`.
///
/// `build` must bind the tensors it wants checked through the binder with
/// `trainable = true`; the numeric pass perturbs those same tensors by name.
/// Returns the relative error per tracked tensor.
pub fn check_param_set<P: ParamSet + Clone>(
    params: &P,
    step: f64,
    build: &dyn Fn(&mut Graph, &mut Binder, &P) -> Var,
) -> BTreeMap<String, f64> {
    let mut g = Graph::new();
    let mut binder = Binder::new();
    let loss = build(&mut g, &mut binder, params);
    let mut grads = g.backward(loss).expect("scalar loss");
    let analytic = binder.collect(&g, &mut grads);

    let eval = |p: &P| {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let l = build(&mut g, &mut b, p);
        g.value(l).as_scalar()
    };
    let mut out = BTreeMap::new();
    for (name, a) in &analytic {
        let mut base = None;
        params.visit(&mut |n, m| {
            if n == name {
                base = Some(m.clone());
            }
        });
        let base = base.unwrap_or_else(|| panic!("tracked tensor {name} is not in the parameter set"));
        let numeric = central_difference(&base, step, &mut |m| {
            let mut p = params.clone();
            p.visit_mut(&mut |n, t| {
                if n == name {
                    *t = m.clone();
                }
            });
            eval(&p)
        });
        out.insert(name.clone(), relative_error(a, &numeric));
    }
    out
}

/// Gradient of a scalar with respect to one input matrix, analytic and
/// numeric: `(relative error, analytic)`.
pub fn check_input(x: &Matrix, step: f64, build: &dyn Fn(&mut Graph, Var) -> Var) -> (f64, Matrix) {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = build(&mut g, xv);
    let analytic = g.backward(loss).expect("scalar loss").take(xv).unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
    let numeric = central_difference(x, step, &mut |m| {
        let mut g = Graph::new();
        let v = g.constant(m.clone());
        let l = build(&mut g, v);
        g.value(l).as_scalar()
    });
    (relative_error(&analytic, &numeric), analytic)
}
