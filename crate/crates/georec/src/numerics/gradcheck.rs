//! Finite-difference gradient checker.

use super::tape::{Tape, ValId};
use super::tensor::Tensor;
use super::NumericsError;

/// Compare the analytic gradient of a scalar function against central finite
/// differences, returning the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `eps` must lie in `[1e-7, 1e-3]`. A non-finite function value is an error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, ValId) -> Result<ValId, NumericsError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NumericsError::Invalid(format!(
            "grad_check eps must be in [1e-7, 1e-3], got {eps}"
        )));
    }

    let eval = |t: &Tensor| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let id = tape.leaf(t.clone());
        let out = f(&mut tape, id)?;
        let v = tape.value(out).scalar_value()?;
        if !v.is_finite() {
            return Err(NumericsError::NonFinite("grad_check function value"));
        }
        Ok(v)
    };

    // Analytic gradient.
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone());
    let out = f(&mut tape, id)?;
    let out_v = tape.value(out).scalar_value()?;
    if !out_v.is_finite() {
        return Err(NumericsError::NonFinite("grad_check function value"));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
