//! Central finite-difference gradient checking.
//!
//! The numeric side only re-runs the forward function on perturbed copies of
//! the inputs, so it never touches the backward code it is checking.

use crate::error::Result;
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest element-wise relative error.
    pub max_rel_err: f64,
    /// Largest absolute difference.
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that entries where
/// both gradients vanish compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d f / d inputs` where `f` builds a scalar from leaf inputs.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(&t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v, &g)).collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            update(&mut report, analytic[k][i], numeric, floor);
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to every parameter in
/// `store` (or only those whose name passes `filter`).
pub fn check_params<F>(
    store: &ParameterStore,
    step: f64,
    floor: f64,
    filter: impl Fn(&str) -> bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for (id, grad) in grads.param_grads(&g) {
        analytic[id] = grad;
    }
    drop(g);

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for id in 0..store.len() {
        if !filter(store.name(id)) {
            continue;
        }
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let plus = {
                let mut g = Graph::with_params(&work);
                let out = f(&mut g)?;
                g.scalar(out)
            };
            work.get_mut(id).data_mut()[i] = orig - step;
            let minus = {
                let mut g = Graph::with_params(&work);
                let out = f(&mut g)?;
                g.scalar(out)
            };
            work.get_mut(id).data_mut()[i] = orig;
            update(&mut report, analytic[id][i], (plus - minus) / (2.0 * step), floor);
        }
    }
    Ok(report)
}

fn update(report: &mut GradCheckReport, analytic: f64, numeric: f64, floor: f64) {
    report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric, floor));
    report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
    report.checked += 1;
}
