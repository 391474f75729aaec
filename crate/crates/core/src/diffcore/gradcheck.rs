use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares reverse-mode gradients of a scalar loss against central
/// differences with step `h`, over every entry of the parameters in `ids`
/// (all parameters when `ids` is empty).
///
/// `loss` must build the same graph on every call; stochastic ops inside it
/// have to draw from a stream created inside the closure.
pub fn check_gradients<F>(store: &ParamStore, ids: &[ParamId], h: f64, loss: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let ids: Vec<ParamId> = if ids.is_empty() {
        store.ids().collect()
    } else {
        ids.to_vec()
    };
    let analytic = {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        g.backward(l)?;
        g.param_grads()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let l = loss(&mut g)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                iteration: 0,
            });
        }
        Ok(v)
    };
    let mut work = store.clone();
    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for id in ids {
        let grad = analytic.iter().find(|(pid, _)| *pid == id).map(|(_, t)| t.clone());
        for idx in 0..store.value(id).len() {
            let orig = store.value(id).data()[idx];
            work.value_mut(id).data_mut()[idx] = orig + h;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[idx] = orig - h;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |t| t.data()[idx]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), idx));
                }
            }
        }
    }
    Ok(report)
}
