//! Central-difference gradient checking.

use crate::error::Result;

/// Compare an analytic gradient of `f` at `x` against central differences.
///
/// Returns the worst relative error
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut xs = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = f(&xs)?;
        xs[i] = orig - h;
        let down = f(&xs)?;
        xs[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
