use std::rc::Rc;

use super::matrix::Matrix;
use super::tape::Var;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-30;

/// Tolerance on row sums when a probability input is required.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// Rescales every row to Euclidean norm `beta`.
pub fn scaled_l2_normalize(v: Var<'_>, beta: f64) -> Result<Var<'_>> {
    let value = v.value();
    if let Some(row) = value
        .iter_rows()
        .position(|r| r.iter().all(|&x| x == 0.0))
    {
        return Err(Error::Degenerate {
            op: "scaled_l2_normalize",
            detail: format!("row {row} has zero norm"),
        });
    }
    let cols = value.cols();
    let inv_norm = v.square()?.row_sum()?.sqrt()?.recip()?.scale(beta)?;
    v.mul(inv_norm.broadcast_cols(cols)?)
}

/// `-sum_i sum_j target(j) log p_ij`, summed over the rows of `p`.
///
/// `target` is either a single 1xK row applied to every row of `p`, or a
/// full matrix with one target row per row of `p`.
pub fn cross_entropy_rows<'t>(p: Var<'t>, target: &Matrix) -> Result<Var<'t>> {
    let probs = p.value();
    if target.cols() != probs.cols() || (target.rows() != 1 && target.rows() != probs.rows()) {
        return Err(Error::dim("cross_entropy_rows", probs.shape(), target.shape()));
    }
    check_stochastic("cross_entropy_rows", &probs, "input")?;
    check_stochastic("cross_entropy_rows", target, "target")?;
    let weights = if target.rows() == probs.rows() {
        target.clone()
    } else {
        Matrix::from_fn(probs.rows(), probs.cols(), |_, j| target.get(0, j))
    };
    p.log_clamped(LOG_FLOOR)?
        .mul_const(Rc::new(weights))?
        .sum()?
        .neg()
}

fn check_stochastic(op: &'static str, m: &Matrix, what: &str) -> Result<()> {
    if let Some(bad) = m.data().iter().find(|&&v| v < -STOCHASTIC_TOL) {
        return Err(Error::Contract {
            op,
            detail: format!("{what} has negative entry {bad}"),
        });
    }
    for (i, s) in m.row_sums().into_iter().enumerate() {
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Contract {
                op,
                detail: format!("{what} row {i} sums to {s}, not 1"),
            });
        }
    }
    Ok(())
}

/// Mean of the rows: 1xm.
pub fn row_mean(v: Var<'_>) -> Result<Var<'_>> {
    let n = v.shape().0 as f64;
    v.col_sum()?.scale(1.0 / n)
}

/// Per-row Shannon entropy, averaged over rows.
pub fn mean_row_entropy(p: &Matrix) -> f64 {
    let total: f64 = p
        .iter_rows()
        .map(|r| -r.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>())
        .sum();
    total / p.rows() as f64
}
