use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of a scalar function.
pub fn numeric_gradient(
    mut f: impl FnMut(&Matrix) -> Result<f64>,
    x: &Matrix,
    h: f64,
) -> Result<Matrix> {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `max |a - n| / max(1, |a|)` over entries.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::dim("max_relative_error", analytic.shape(), numeric.shape()));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0, |m, (&a, &n)| m.max((a - n).abs() / a.abs().max(1.0))))
}

/// Compares the tape gradient of `f` at `x` with central differences of
/// step `h` and returns the max relative error.
pub fn finite_diff_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let input = tape.var(x.clone());
    let out = f(&tape, input)?;
    let analytic = tape.backward(out)?.get(input);
    let numeric = numeric_gradient(
        |p| {
            let tape = Tape::new();
            let input = tape.var(p.clone());
            Ok(f(&tape, input)?.item())
        },
        x,
        h,
    )?;
    max_relative_error(&analytic, &numeric)
}
