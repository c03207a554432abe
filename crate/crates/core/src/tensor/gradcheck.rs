use crate::error::{Error, Result};

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        let d = (fp - fm) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::NonFiniteGradient { index: i });
        }
        g.push(d);
    }
    Ok(g)
}

/// Compares an analytic gradient against central differences with step
/// [`GRAD_CHECK_STEP`]. Returns the max over coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> Result<f64> {
    if analytic.len() != x.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: analytic.len(),
        });
    }
    if let Some(i) = analytic.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFiniteGradient { index: i });
    }
    let numeric = numerical_gradient(f, x, GRAD_CHECK_STEP)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}
