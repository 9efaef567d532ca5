//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Denominator floor for the relative error, so gradients that are zero up
/// to truncation error do not register as large relative deviations.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares [`Graph::backward`] against `(f(θ+ε) − f(θ−ε)) / 2ε` for every
/// element of every parameter and reports the worst relative error.
pub fn finite_difference_check<F>(params: &ParamStore<f64>, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    finite_difference_check_sampled(params, eps, usize::MAX, loss_fn)
}

/// Like [`finite_difference_check`] but probes at most `max_per_param`
/// evenly spaced elements of each parameter.
pub fn finite_difference_check_sampled<F>(
    params: &ParamStore<f64>,
    eps: f64,
    max_per_param: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss_fn(&mut g, p)?;
        Ok(g.value(root).item())
    };
    let mut g = Graph::new();
    let root = loss_fn(&mut g, params)?;
    let grads = g.backward(root, params)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };
    let mut probe = params.clone();
    for id in params.ids() {
        let n = params.get(id).len();
        let stride = if n <= max_per_param { 1 } else { n.div_ceil(max_per_param) };
        for j in (0..n).step_by(stride.max(1)) {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).data()[j];
            let err = relative_error(analytic, numeric);
            report.elements_checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_param = params.name(id).to_string();
                report.worst_index = j;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_loss_is_exact_to_rounding() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap()).unwrap();
        let coeff = Tensor::new(vec![3], vec![3.0, -2.0, 0.7]).unwrap();
        let r = finite_difference_check(&s, 1e-4, |g, p| {
            let w = g.param_named(p, "w");
            let c = g.constant(coeff.clone());
            let prod = g.mul(w, c)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.elements_checked, 3);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let mut s = ParamStore::new();
        s.insert(
            "logits",
            Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.7, 1.5, 0.1, -0.3]).unwrap(),
        )
        .unwrap();
        let r = finite_difference_check(&s, 1e-4, |g, p| {
            let x = g.param_named(p, "logits");
            g.softmax_cross_entropy(x, &[2, 0], Some(&[1.0, 3.0]))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn wrong_gradient_rule_is_caught() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![0.8, -1.3]).unwrap()).unwrap();
        // Forward is x³ but the supplied derivative is 2x.
        let r = finite_difference_check(&s, 1e-4, |g, p| {
            let w = g.param_named(p, "w");
            let y = g.map(w, |x| x * x * x, |x| 2.0 * x);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.1, "{r:?}");
    }
}
