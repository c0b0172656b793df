use super::{Tape, Var};
use crate::error::{LabError, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central finite
/// differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(LabError::Contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()))
        .into_data();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let o = f(&mut t, v)?;
        Ok(t.value(o).data()[0])
    };
    let mut worst = 0.0_f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
