//! Central finite-difference gradient checks.

use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, atol: f64, rtol: f64) -> bool {
        self.max_abs_error <= atol || self.max_rel_error <= rtol
    }
}

/// Compare `analytic` against central differences of `f` at `x`.
///
/// `f` is evaluated twice at the unperturbed point first; if the two values
/// differ the function is non-deterministic and the check is refused.
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!("{} params, {} gradient entries", x.len(), analytic.len())));
    }
    let f0 = f(x)?;
    let f1 = f(x)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Invalid(format!("objective is not deterministic: {f0} then {f1}")));
    }
    let mut p = x.to_vec();
    let mut report = GradCheckReport { max_abs_error: 0.0, max_rel_error: 0.0, checked: 0, worst_index: 0 };
    for i in 0..x.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = f(&p)?;
        p[i] = orig - eps;
        let down = f(&p)?;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratic() {
        let x = [1.0, -2.0, 0.5];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = finite_diff_check(|p| Ok(p.iter().map(|v| v * v).sum()), &x, &g, 1e-5, 1e-8).unwrap();
        assert!(r.max_rel_error < 1e-9);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn catches_wrong_gradient() {
        let x = [1.0, 2.0];
        let r = finite_diff_check(|p| Ok(p[0] * p[1]), &x, &[2.0, 2.0], 1e-5, 1e-8).unwrap();
        assert!(r.max_rel_error > 0.4);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn refuses_nondeterministic_objective() {
        let mut n = 0.0;
        let res = finite_diff_check(
            |_| {
                n += 1.0;
                Ok(n)
            },
            &[0.0],
            &[0.0],
            1e-5,
            1e-8,
        );
        assert!(res.is_err());
    }
}
