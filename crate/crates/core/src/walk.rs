//! Random walks from seen class centers through generated features.
//!
//! A walk starts at a class center, hops to a generated point, takes `t`
//! steps among generated points and hops back to a class center. The
//! deviation loss pushes the landing distribution of every start class
//! toward uniform; the attraction variant pushes it toward the start class.
//! The visit loss asks the class-to-generation hop to cover every generated
//! point evenly.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{cross_entropy_rows, mean_row_entropy, row_mean, Matrix, Var};

/// Landing target for the deviation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMode {
    /// Uniform over seen classes (deviation).
    Uniform,
    /// One-hot on the start class (attraction).
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    /// Largest number of steps among generated points.
    pub steps: usize,
    /// Per-step decay of the landing terms.
    pub gamma: f64,
    /// Similarity written on the diagonal of the generation graph. Must be
    /// strongly negative so self-transitions get no mass.
    pub diag_fill: f64,
    pub target: TargetMode,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            steps: 10,
            gamma: 0.7,
            diag_fill: -1e9,
            target: TargetMode::Uniform,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !self.diag_fill.is_finite() {
            return Err(Error::Config("diag_fill must be finite".into()));
        }
        Ok(())
    }
}

/// Similarities and the three row-stochastic transition matrices.
#[derive(Debug, Clone, Copy)]
pub struct TransitionBundle<'t> {
    /// Generation-to-generation similarities, N_u x N_u.
    pub a: Var<'t>,
    /// Generation-to-center similarities, N_u x K.
    pub b: Var<'t>,
    /// Class to generation, K x N_u.
    pub c2x: Var<'t>,
    /// Generation to class, N_u x K.
    pub x2c: Var<'t>,
    /// Generation to generation, N_u x N_u.
    pub x2x: Var<'t>,
}

impl TransitionBundle<'_> {
    pub fn num_classes(&self) -> usize {
        self.b.shape().1
    }

    pub fn num_generated(&self) -> usize {
        self.b.shape().0
    }
}

/// Differentiable walk loss terms.
#[derive(Debug, Clone)]
pub struct WalkLoss<'t> {
    pub deviation: Var<'t>,
    pub visit: Var<'t>,
    pub total: Var<'t>,
    /// Landing matrices for t = 0..=steps.
    pub landing: Vec<Var<'t>>,
    pub visit_distribution: Var<'t>,
}

/// Plain-value snapshot of a [`WalkLoss`].
#[derive(Debug, Clone, PartialEq)]
pub struct WalkLossReport {
    pub deviation: f64,
    pub visit: f64,
    pub total: f64,
    pub landing: Vec<Matrix>,
    pub visit_distribution: Matrix,
}

impl WalkLossReport {
    /// Row entropy of the landing matrices, averaged over rows and steps.
    pub fn mean_landing_entropy(&self) -> f64 {
        let n = self.landing.len() as f64;
        self.landing.iter().map(mean_row_entropy).sum::<f64>() / n
    }
}

impl WalkLoss<'_> {
    pub fn report(&self) -> WalkLossReport {
        WalkLossReport {
            deviation: self.deviation.item(),
            visit: self.visit.item(),
            total: self.total.item(),
            landing: self.landing.iter().map(|l| (*l.value()).clone()).collect(),
            visit_distribution: (*self.visit_distribution.value()).clone(),
        }
    }
}

/// Negative squared distances among generations (`A`, diagonal replaced by
/// `cfg.diag_fill`) and from generations to centers (`B`).
pub fn build_similarities<'t>(
    x_u: Var<'t>,
    centers: Var<'t>,
    cfg: &WalkConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let (xs, cs) = (x_u.shape(), centers.shape());
    if xs.1 != cs.1 {
        return Err(Error::dim("build_similarities", xs, cs));
    }
    if cs.0 < 2 {
        return Err(Error::Degenerate {
            op: "build_similarities",
            detail: format!("need at least two class centers, got {}", cs.0),
        });
    }
    let n = xs.0;
    let off_diagonal = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
    let fill = Matrix::identity(n).scale(cfg.diag_fill);
    let a = x_u
        .pairwise_neg_sqdist(x_u)?
        .mul_const(Rc::new(off_diagonal))?
        .add_const(&fill)?;
    let b = x_u.pairwise_neg_sqdist(centers)?;
    Ok((a, b))
}

pub fn make_transitions<'t>(a: Var<'t>, b: Var<'t>) -> Result<TransitionBundle<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.0 != sa.1 || sa.0 != sb.0 {
        return Err(Error::dim("make_transitions", sa, sb));
    }
    Ok(TransitionBundle {
        a,
        b,
        c2x: b.t()?.row_softmax()?,
        x2c: b.row_softmax()?,
        x2x: a.row_softmax()?,
    })
}

/// `P_c2x * P_x2x^t * P_x2c`, K x K.
pub fn landing_probability<'t>(bundle: &TransitionBundle<'t>, t: usize) -> Result<Var<'t>> {
    let mut walk = bundle.c2x;
    for _ in 0..t {
        walk = walk.matmul(bundle.x2x)?;
    }
    walk.matmul(bundle.x2c)
}

/// Landing matrices for every t in `0..=max_steps`, sharing the walk prefix.
pub fn landing_sequence<'t>(bundle: &TransitionBundle<'t>, max_steps: usize) -> Result<Vec<Var<'t>>> {
    let mut out = Vec::with_capacity(max_steps + 1);
    let mut walk = bundle.c2x;
    for t in 0..=max_steps {
        if t > 0 {
            walk = walk.matmul(bundle.x2x)?;
        }
        out.push(walk.matmul(bundle.x2c)?);
    }
    Ok(out)
}

/// Probability of visiting each generation from a uniformly chosen class:
/// the mean of the class-to-generation rows, 1 x N_u.
pub fn visit_distribution(p_c2x: Var<'_>) -> Result<Var<'_>> {
    row_mean(p_c2x)
}

/// Deviation loss: landing rows pushed toward uniform.
pub fn grawd_loss<'t>(bundle: &TransitionBundle<'t>, cfg: &WalkConfig) -> Result<WalkLoss<'t>> {
    let k = bundle.num_classes();
    walk_loss_with_target(bundle, cfg, &Matrix::filled(1, k, 1.0 / k as f64))
}

/// Attraction loss: landing rows pushed toward the start class.
pub fn grawt_loss<'t>(bundle: &TransitionBundle<'t>, cfg: &WalkConfig) -> Result<WalkLoss<'t>> {
    walk_loss_with_target(bundle, cfg, &Matrix::identity(bundle.num_classes()))
}

/// Dispatches on `cfg.target`.
pub fn walk_loss<'t>(bundle: &TransitionBundle<'t>, cfg: &WalkConfig) -> Result<WalkLoss<'t>> {
    match cfg.target {
        TargetMode::Uniform => grawd_loss(bundle, cfg),
        TargetMode::Identity => grawt_loss(bundle, cfg),
    }
}

/// Builds the graph over `x_u` and `centers` and evaluates the walk loss.
pub fn walk_loss_from_features<'t>(
    x_u: Var<'t>,
    centers: Var<'t>,
    cfg: &WalkConfig,
) -> Result<WalkLoss<'t>> {
    let (a, b) = build_similarities(x_u, centers, cfg)?;
    walk_loss(&make_transitions(a, b)?, cfg)
}

fn walk_loss_with_target<'t>(
    bundle: &TransitionBundle<'t>,
    cfg: &WalkConfig,
    target: &Matrix,
) -> Result<WalkLoss<'t>> {
    cfg.validate()?;
    let landing = landing_sequence(bundle, cfg.steps)?;
    let mut deviation: Option<Var<'t>> = None;
    let mut weight = 1.0;
    for p in &landing {
        let term = cross_entropy_rows(*p, target)?.scale(weight)?;
        deviation = Some(match deviation {
            None => term,
            Some(acc) => acc.add(term)?,
        });
        weight *= cfg.gamma;
    }
    let deviation = deviation.expect("landing sequence is never empty");
    let visit_distribution = visit_distribution(bundle.c2x)?;
    let n = bundle.num_generated();
    let visit = cross_entropy_rows(visit_distribution, &Matrix::filled(1, n, 1.0 / n as f64))?;
    Ok(WalkLoss {
        deviation,
        visit,
        total: deviation.add(visit)?,
        landing,
        visit_distribution,
    })
}

#[cfg(test)]
mod tests;
