//! Central finite-difference gradient checking for any [`ParamTree`].

use crate::scalar::Scalar;
use crate::tensor::ParamTree;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Relative error with a floor on the denominator so that entries where
/// both gradients vanish do not blow up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against the five-point central difference
/// `(-L(p+2h) + 8L(p+h) - 8L(p-h) + L(p-2h)) / 12h` for every scalar
/// parameter.
pub fn check<T, P, F>(params: &P, analytic: &P, loss: F, h: f64) -> GradReport
where
    T: Scalar,
    P: ParamTree<T>,
    F: Fn(&P) -> f64,
{
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(_, g)| g.data().iter().map(|v| v.as_f64()).collect())
        .collect();
    let mut probe = params.clone();
    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (k, name) in names.iter().enumerate() {
        for i in 0..grads[k].len() {
            let orig = probe.tensors_mut()[k].data()[i];
            let mut at = |offset: f64| {
                probe.tensors_mut()[k].data_mut()[i] = orig + T::of(offset);
                loss(&probe)
            };
            let numeric = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            probe.tensors_mut()[k].data_mut()[i] = orig;
            let err = relative_error(grads[k][i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!(
                    "{name}[{i}]: analytic {} numeric {numeric}",
                    grads[k][i]
                );
            }
        }
    }
    report
}
