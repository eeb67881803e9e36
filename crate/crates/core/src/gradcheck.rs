//! Central finite-difference verification of hand-derived gradients.

use crate::error::Result;
use crate::optim::ParamMap;

/// Worst offending element of a check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub key: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub worst: Option<GradCheckEntry>,
    /// Entries exceeding `tol`, capped at 16 for readability.
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} elements, max rel err {:.3e} (tol {:.1e})",
            if self.passed() { "pass" } else { "FAIL" },
            self.checked,
            self.max_rel_err,
            self.tol
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                ", worst at {}[{}] analytic {:.6e} vs numeric {:.6e}",
                w.key, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

// Central differences resolve gradients down to roughly |f| * eps / h
// (~1e-10 here); elements below the scale floor are compared absolutely so
// that fd noise on near-zero gradients does not mask real errors elsewhere.
fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-6 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Compares `analytic` against central differences of `loss_fn` elementwise.
///
/// Only the keys present in `analytic` are perturbed; `loss_fn` must be
/// deterministic in `params`.
pub fn finite_diff_check(
    mut loss_fn: impl FnMut(&ParamMap) -> Result<f64>,
    params: &ParamMap,
    analytic: &ParamMap,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        tol,
        worst: None,
        failures: Vec::new(),
    };
    for (key, grad) in analytic {
        let n = grad.len();
        for i in 0..n {
            let original = params[key].data()[i];
            work.get_mut(key).unwrap().data_mut()[i] = original + h;
            let plus = loss_fn(&work)?;
            work.get_mut(key).unwrap().data_mut()[i] = original - h;
            let minus = loss_fn(&work)?;
            work.get_mut(key).unwrap().data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(GradCheckEntry {
                    key: key.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
            if err > tol && report.failures.len() < 16 {
                report.failures.push(GradCheckEntry {
                    key: key.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params_of(v: &[f64]) -> ParamMap {
        let mut m = ParamMap::new();
        m.insert("w".into(), Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        m
    }

    #[test]
    fn quadratic_gradient_passes() {
        let params = params_of(&[3.0]);
        let analytic = params_of(&[6.0]);
        let report = finite_diff_check(
            |p| Ok(p["w"].data()[0] * p["w"].data()[0]),
            &params,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn constant_function_zero_gradient_passes() {
        let params = params_of(&[1.0, -2.0]);
        let analytic = params_of(&[0.0, 0.0]);
        let report = finite_diff_check(|_| Ok(42.0), &params, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let params = params_of(&[3.0]);
        let analytic = params_of(&[5.0]);
        let report = finite_diff_check(
            |p| Ok(p["w"].data()[0] * p["w"].data()[0]),
            &params,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 1);
    }
}
