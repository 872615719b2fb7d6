//! Central finite-difference oracle for the hand-written backward passes.

use serde::Serialize;

use crate::params::{NamedTensors, ParamSet};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub param_name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` (same layout as `params`) against
/// `(f(p + eps) - f(p - eps)) / (2 eps)` entry by entry, one report per named array.
pub fn grad_check<P, F>(
    mut f: F,
    params: &P,
    analytic: &P,
    eps: f64,
    tol: f64,
) -> Result<Vec<GradCheckReport>>
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let base = params.to_flat();
    let grads = analytic.to_flat();
    if grads.len() != base.len() {
        return Err(Error::Shape("analytic gradient layout differs from parameters".into()));
    }
    let mut probe = params.clone();
    let mut eval = |flat: &[f64], probe: &mut P| -> Result<f64> {
        probe.load_flat(flat);
        let v = f(probe)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("non-finite loss {v} at probe point")));
        }
        Ok(v)
    };
    eval(&base, &mut probe)?;

    let mut reports = Vec::new();
    let mut at = 0;
    let mut work = base.clone();
    for (name, len) in params.names() {
        let mut worst: f64 = 0.0;
        for i in at..at + len {
            work[i] = base[i] + eps;
            let plus = eval(&work, &mut probe)?;
            work[i] = base[i] - eps;
            let minus = eval(&work, &mut probe)?;
            work[i] = base[i];
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_error(grads[i], numeric));
        }
        at += len;
        reports.push(GradCheckReport { param_name: name, max_rel_error: worst, passed: worst < tol });
    }
    Ok(reports)
}

/// Variant that reads the analytic gradient from each tensor's `grad` buffer.
pub fn grad_check_tensors<F>(
    f: F,
    tensors: &NamedTensors,
    eps: f64,
    tol: f64,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&NamedTensors) -> Result<f64>,
{
    let mut analytic = tensors.clone();
    for (name, t) in &mut analytic.0 {
        let g = t
            .grad
            .take()
            .ok_or_else(|| Error::Config(format!("tensor {name} has no gradient buffer")))?;
        t.data = g;
    }
    grad_check(f, tensors, &analytic, eps, tol)
}

pub fn all_passed(reports: &[GradCheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

pub fn worst(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(name: &str, v: f64, g: f64) -> NamedTensors {
        let mut t = Tensor::vector(vec![v]);
        t.set_grad(vec![g]).unwrap();
        NamedTensors(vec![(name.into(), t)])
    }

    #[test]
    fn quadratic_is_exact() {
        let p = single("x", 1.0, 2.0);
        let r = grad_check_tensors(|p| Ok(p.0[0].1.data[0].powi(2)), &p, 1e-5, 1e-8).unwrap();
        assert!(r[0].passed, "{:?}", r);
        assert!(r[0].max_rel_error < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let p = single("c", 3.0, 0.0);
        let r = grad_check_tensors(|_| Ok(7.0), &p, 1e-5, 1e-8).unwrap();
        assert_eq!(r[0].max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let p = single("x", 1.0, 3.0);
        let r = grad_check_tensors(|p| Ok(p.0[0].1.data[0].powi(2)), &p, 1e-5, 1e-4).unwrap();
        assert!(!r[0].passed);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        let p = single("x", 1.0, 0.0);
        assert!(grad_check_tensors(|_| Ok(0.0), &p, 1e-2, 1e-4).is_err());
        assert!(grad_check_tensors(|_| Ok(f64::NAN), &p, 1e-5, 1e-4).is_err());
    }

    #[test]
    fn missing_grad_buffer_is_an_error() {
        let p = NamedTensors(vec![("x".into(), Tensor::vector(vec![1.0]))]);
        assert!(grad_check_tensors(|_| Ok(0.0), &p, 1e-5, 1e-4).is_err());
    }
}
