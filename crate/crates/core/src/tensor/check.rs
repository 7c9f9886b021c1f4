use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar function against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("gradient_check step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe, false);
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("gradient_check"))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}
