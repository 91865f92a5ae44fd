//! Central finite-difference gradient checking.

use super::params::{Grads, ParamStore};

/// Gradients with magnitude below this are compared on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a − n| / max(|a|, |n|, ABS_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the analytic gradient returned by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every scalar of every parameter.
pub fn check_param_gradients<F>(store: &ParamStore, f: F, h: f64) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, Grads),
{
    check_selected_gradients(store, f, h, |_| true)
}

/// As [`check_param_gradients`], restricted to parameters whose name passes
/// `select`.
pub fn check_selected_gradients<F, S>(store: &ParamStore, f: F, h: f64, select: S) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, Grads),
    S: Fn(&str) -> bool,
{
    let (_, grads) = f(store);
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let n = store.get(id).len();
        for k in 0..n {
            let original = store.get(id).as_slice().expect("standard layout")[k];
            probe.get_mut(id).as_slice_mut().unwrap()[k] = original + h;
            let (up, _) = f(&probe);
            probe.get_mut(id).as_slice_mut().unwrap()[k] = original - h;
            let (down, _) = f(&probe);
            probe.get_mut(id).as_slice_mut().unwrap()[k] = original;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads
                .get(id)
                .map(|g| g.as_slice().expect("standard layout")[k])
                .unwrap_or(0.0);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    report
}
