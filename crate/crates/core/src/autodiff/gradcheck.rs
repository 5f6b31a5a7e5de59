//! Central-difference gradient checking.
//!
//! Used by the test suites to compare analytic gradients against an
//! independent finite-difference route. The comparison is relative with
//! an absolute floor on the denominator: coordinates whose analytic and
//! numerical derivatives are both below the floor are judged at the
//! floor's scale, since the difference quotient carries absolute noise of
//! roughly (loss rounding error) / (2h) regardless of the true gradient.

use crate::Result;

/// Outcome of checking a sample of coordinates.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdSummary {
    pub checked: usize,
    pub failed: usize,
    pub max_rel: f64,
}

impl FdSummary {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        (self.checked - self.failed) as f64 / self.checked as f64
    }

    pub fn merge(&mut self, other: FdSummary) {
        self.checked += other.checked;
        self.failed += other.failed;
        self.max_rel = self.max_rel.max(other.max_rel);
    }
}

/// Relative error of `analytic` against `fd` with an absolute floor.
pub fn relative_error(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Check `analytic[coords]` against central differences of `eval`.
///
/// `eval(coord, value)` must recompute the scalar objective with that one
/// coordinate of the parameter replaced by `value`; the parameter itself
/// is restored by the caller (eval receives the perturbed value
/// explicitly and must not mutate shared state).
pub fn check_coords(
    param: &[f32],
    analytic: &[f32],
    coords: &[usize],
    h: f32,
    rel_tol: f64,
    floor: f64,
    mut eval: impl FnMut(usize, f32) -> Result<f64>,
) -> Result<FdSummary> {
    let mut summary = FdSummary::default();
    for &i in coords {
        let x0 = param[i];
        let fp = eval(i, x0 + h)?;
        let fm = eval(i, x0 - h)?;
        let fd = (fp - fm) / (2.0 * h as f64);
        let rel = relative_error(analytic[i] as f64, fd, floor);
        summary.checked += 1;
        summary.max_rel = summary.max_rel.max(rel);
        if rel >= rel_tol {
            summary.failed += 1;
        }
    }
    Ok(summary)
}
