//! Central finite differences over every parameter of a [`Tensors`] model.
//! Used by the test suites as the independent oracle for hand-written
//! backward passes.

use crate::params::Tensors;

/// Numerical gradient of `loss` with central differences of half-width `step`.
pub fn numeric_gradient<P, F>(params: &P, step: f64, loss: F) -> P
where
    P: Tensors + Clone,
    F: Fn(&P) -> f64,
{
    let mut probe = params.clone();
    let mut grad = params.clone();
    grad.fill_zero();
    let n_tensors = params.tensors().len();
    for t in 0..n_tensors {
        let len = params.tensors()[t].1.len();
        for j in 0..len {
            let orig = *probe.tensors_mut()[t].iter_mut().nth(j).unwrap();
            *probe.tensors_mut()[t].iter_mut().nth(j).unwrap() = orig + step;
            let up = loss(&probe);
            *probe.tensors_mut()[t].iter_mut().nth(j).unwrap() = orig - step;
            let down = loss(&probe);
            *probe.tensors_mut()[t].iter_mut().nth(j).unwrap() = orig;
            *grad.tensors_mut()[t].iter_mut().nth(j).unwrap() = (up - down) / (2.0 * step);
        }
    }
    grad
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)` over all tensors,
/// together with the name of the worst tensor.
pub fn max_relative_error<P: Tensors>(analytic: &P, numeric: &P, floor: f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        for (x, y) in a.iter().zip(n.iter()) {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            if err > worst.0 || err.is_nan() {
                worst = (err, name.clone());
            }
        }
    }
    worst
}
