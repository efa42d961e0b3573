//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Compares `analytic` against central differences of `f` around `x`.
///
/// Returns the maximum over coordinates of
/// `|cd_i - analytic_i| / max(scale, 1e-8)` where `scale` is the largest
/// analytic-gradient magnitude. Evaluations of `f` that come back non-finite
/// abort with the offending coordinate index.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    assert!(h > 0.0, "step must be positive");
    let scale = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let denom = scale.max(1e-8);
    let mut xs = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: "grad_check function evaluation",
                ctx: Some(format!("coordinate {i}")),
            });
        }
        let cd = (fp - fm) / (2.0 * h);
        worst = worst.max((cd - analytic[i]).abs() / denom);
    }
    Ok(worst)
}
