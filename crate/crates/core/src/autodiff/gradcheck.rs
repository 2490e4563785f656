//! Central finite-difference verification of analytic gradients.

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::params::{Gradients, ParamStore};
use crate::error::{invalid, Result};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Worst error observed for one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    pub elements: usize,
    /// `max |analytic - numeric| / max(max |numeric|, max |analytic|)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error <= self.tolerance)
    }
}

/// Relative error of two equally long gradient vectors, normalized by the
/// larger of their infinity norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let abs = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let rel = if scale < 1e-300 { abs } else { abs / scale };
    (rel, abs)
}

/// Compares `analytic` against central differences of `loss` taken on every
/// element of every parameter in `store`. Probes run in parallel, each on a
/// private copy of the store.
pub fn check_gradients<F>(
    store: &ParamStore,
    loss: F,
    analytic: &Gradients,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync,
{
    let mut groups = Vec::with_capacity(store.len());
    for (name, param) in store.iter() {
        let n = param.value.len();
        let zeros;
        let a = match analytic.get(name) {
            Some(g) if g.len() == n => g.data(),
            Some(g) => {
                return Err(invalid(format!(
                    "analytic gradient for {name} has {} elements, expected {n}",
                    g.len()
                )))
            }
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        let numeric: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || store.clone(),
                |probe, i| -> Result<f64> {
                    let orig = store.get(name)?.data()[i];
                    probe.get_mut(name)?.data_mut()[i] = orig + step;
                    let up = loss(probe)?;
                    probe.get_mut(name)?.data_mut()[i] = orig - step;
                    let down = loss(probe)?;
                    probe.get_mut(name)?.data_mut()[i] = orig;
                    Ok((up - down) / (2.0 * step))
                },
            )
            .collect::<Result<_>>()?;
        let (max_rel_error, max_abs_error) = relative_error(a, &numeric);
        groups.push(GroupError { name: name.to_string(), elements: n, max_rel_error, max_abs_error });
    }
    Ok(GradCheckReport { tolerance, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cubic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        s
    }

    fn cubic(s: &ParamStore) -> Result<f64> {
        Ok(s.get("w")?.data().iter().map(|v| v * v * v).sum())
    }

    #[test]
    fn exact_gradient_passes() {
        let s = cubic_store();
        let mut g = Gradients::new();
        g.insert("w".into(), s.get("w").unwrap().map(|v| 3.0 * v * v));
        let r = check_gradients(&s, cubic, &g, FD_STEP, 1e-8).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let s = cubic_store();
        let mut g = Gradients::new();
        g.insert("w".into(), s.get("w").unwrap().map(|v| 2.0 * v * v));
        let r = check_gradients(&s, cubic, &g, FD_STEP, 1e-6).unwrap();
        assert!(!r.passed());
        assert!(r.worst() > 1e-2);
    }

    #[test]
    fn empty_store_reports_nothing() {
        let r = check_gradients(&ParamStore::new(), |_| Ok(0.0), &Gradients::new(), FD_STEP, 1e-6).unwrap();
        assert!(r.groups.is_empty());
        assert!(r.passed());
    }
}
