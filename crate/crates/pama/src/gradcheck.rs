//! Central-difference gradient checking.
//!
//! The analytic gradient under test comes from [`crate::tensor::Tape::backward`];
//! the independent reference is a two-sided finite difference of the same
//! scalar function. The reported figure is
//! `max_i |analytic_i − fd_i| / max(1, |fd_i|)`, i.e. absolute error for
//! small gradients and relative error for large ones.

use crate::tensor::TensorError;

/// Checks `analytic` against central differences of `f` around `x`.
///
/// `f` must be deterministic: it is re-evaluated `2·len(x)` times at
/// perturbed inputs. Any non-finite loss or gradient is an error rather than
/// a large score, so silent NaNs cannot pass as agreement.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64, TensorError>,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64, TensorError> {
    if analytic.len() != x.len() {
        return Err(TensorError::ShapeMismatch {
            op: "grad_check",
            expected: format!("{} gradient entries", x.len()),
            got: format!("{}", analytic.len()),
        });
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::NonFinite { op: "grad_check eps" });
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * eps);
        if !fd.is_finite() || !analytic[i].is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
