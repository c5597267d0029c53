//! Central finite-difference verification of analytic gradients.

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest elementwise relative error.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Index of the coordinate with the largest relative error.
    pub worst: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    /// Combines reports from several argument groups.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let (max_rel_err, worst) = if other.max_rel_err > self.max_rel_err {
            (other.max_rel_err, self.checked + other.worst)
        } else {
            (self.max_rel_err, self.worst)
        };
        GradCheckReport {
            max_rel_err,
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            worst,
            checked: self.checked + other.checked,
        }
    }
}

/// Compares `analytic` against central differences of the scalar function
/// `f` around `x`.
///
/// The relative error of coordinate `i` is `|a_i - n_i| / max(|a_i|, |n_i|, s)`
/// where `s = 1e-3 · max_j |a_j|`; the floor keeps coordinates whose true
/// gradient is (near) zero from dominating through rounding noise.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length must match input length");
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut xs = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: 0,
        checked: x.len(),
    };
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let plus = f(&xs);
        xs[i] = orig - step;
        let minus = f(&xs);
        xs[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
    }
    report
}

/// True if any value lies within `eps` of zero, i.e. a ReLU kink that would
/// make central differences straddle a non-differentiable point.
pub fn near_kink(values: &[f64], eps: f64) -> bool {
    values.iter().any(|v| v.abs() < eps)
}
