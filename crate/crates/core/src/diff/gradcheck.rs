// SPDX-License-Identifier: Apache-2.0

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    #[default]
    Central,
    /// Five-point central formula, error O(h⁴). Tolerates larger steps,
    /// which matters when round-off in `f` dominates at small ones.
    Central4,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub stencil: Stencil,
    /// Pass iff the maximum relative error is below this.
    pub tol: f64,
    /// Denominator floor so that two near-zero gradients do not blow up the
    /// relative error.
    pub abs_floor: f64,
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            stencil: Stencil::Central,
            tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares a supplied gradient against central finite differences of
/// `f` at the listed flat indices of `theta` (all indices when `indices` is
/// `None`).
pub fn compare_gradients(
    analytic: &[f64],
    theta: &Array,
    indices: Option<&[usize]>,
    cfg: GradCheckConfig,
    mut f: impl FnMut(&Array) -> Result<f64>,
) -> Result<GradCheckReport> {
    if analytic.len() != theta.len() {
        return Err(Error::dim(
            "grad_check",
            format!("gradient has {} entries, parameter has {}", analytic.len(), theta.len()),
        ));
    }
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        passed: true,
    };
    let mut buf = theta.data().to_vec();
    let h = cfg.step;
    for &i in indices {
        let orig = buf[i];
        let mut at = |x: f64| -> Result<f64> {
            buf[i] = x;
            let v = f(&Array::new(theta.shape().to_vec(), buf.clone())?);
            buf[i] = orig;
            v
        };
        let numeric = match cfg.stencil {
            Stencil::Central => (at(orig + h)? - at(orig - h)?) / (2.0 * h),
            Stencil::Central4 => {
                (8.0 * (at(orig + h)? - at(orig - h)?) - (at(orig + 2.0 * h)? - at(orig - 2.0 * h)?)) / (12.0 * h)
            }
        };
        let rel = relative_error(analytic[i], numeric, cfg.abs_floor);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error < cfg.tol;
    Ok(report)
}

/// Checks the tape gradient of a scalar function of one parameter array
/// against central finite differences over every element.
pub fn grad_check(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    theta: &Array,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let p = tape.param(theta.clone());
    let root = f(&mut tape, p)?;
    let grads = tape.backward(root)?;
    let analytic = match grads.get(p) {
        Some(g) => g.data().to_vec(),
        // Root does not depend on the parameter.
        None => vec![0.0; theta.len()],
    };
    compare_gradients(&analytic, theta, None, cfg, |x| {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let r = f(&mut t, v)?;
        Ok(t.value(r).item())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let theta = Array::vector(vec![0.5, -1.0, 2.0]);
        let r = grad_check(|t, _p| Ok(t.constant(Array::scalar(3.0))), &theta, GradCheckConfig::default()).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn corrupted_partial_fails_and_is_located() {
        let theta = Array::vector(vec![0.3, -0.7, 1.1, 0.2]);
        let f = |x: &Array| Ok(x.data().iter().map(|v| v * v * v).sum::<f64>());
        let mut analytic: Vec<f64> = theta.data().iter().map(|v| 3.0 * v * v).collect();
        analytic[2] *= 1.01;
        let r = compare_gradients(&analytic, &theta, None, GradCheckConfig::default(), f).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, 2);
        assert!(r.max_rel_error > 5e-3);
    }

    #[test]
    fn five_point_stencil_cancels_the_cubic_term() {
        // f = x⁵ at x = 1: the two-point formula gives 5 + 10h² + h⁴, the
        // five-point one 5 − 4h⁴.
        let theta = Array::vector(vec![1.0]);
        let f = |x: &Array| Ok(x.data()[0].powi(5));
        let cfg = |stencil| GradCheckConfig { step: 1e-2, stencil, tol: 1.0, abs_floor: 1e-8 };
        let two = compare_gradients(&[5.0], &theta, None, cfg(Stencil::Central), f).unwrap();
        let five = compare_gradients(&[5.0], &theta, None, cfg(Stencil::Central4), f).unwrap();
        assert!((two.worst_numeric - (5.0 + 1e-3 + 1e-8)).abs() < 1e-10, "{}", two.worst_numeric);
        assert!((five.worst_numeric - 5.0 + 4e-8).abs() < 1e-10, "{}", five.worst_numeric);
    }
}
