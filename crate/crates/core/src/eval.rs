//! Inductive evaluation by nearest-neighbour search over generated features.
//!
//! Unseen descriptors are read here and nowhere in training. Accuracies are
//! averaged per class, then over classes.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Holdout};
use crate::error::{Error, Result, Shape};
use crate::grad::Matrix;
use crate::model::{Checkpoint, Model};
use crate::rng::{stream, Rng};

/// Space in which generated pools and test queries are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalSpace {
    /// Critic trunk features after scaled L2 normalization.
    Phi,
    /// Raw visual features.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub gen_per_class: usize,
    /// Number of calibration offsets when `offsets` is not given.
    pub num_offsets: usize,
    /// Explicit calibration offsets; must be strictly increasing.
    pub offsets: Option<Vec<f64>>,
    pub space: EvalSpace,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gen_per_class: 60,
            num_offsets: 201,
            offsets: None,
            space: EvalSpace::Phi,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gen_per_class == 0 {
            return Err(Error::Config("gen_per_class must be at least 1".into()));
        }
        match &self.offsets {
            Some(o) => {
                if o.len() < 2 || o.iter().any(|v| !v.is_finite()) || o.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("offsets must be finite and strictly increasing".into()));
                }
            }
            None if self.num_offsets < 2 => {
                return Err(Error::Config("num_offsets must be at least 2".into()));
            }
            None => {}
        }
        Ok(())
    }
}

/// Default calibration grid of `count` strictly increasing offsets.
///
/// The ends are `-2 m` and `2 m`, `m` being the largest finite score
/// magnitude, so the first point predicts only seen classes and the last only
/// unseen ones. The curve can only move at a query's flip point (best seen
/// score minus best unseen score), so interior points sit between consecutive
/// flip points. When there are too many, half the slots keep the widest
/// gaps and half are spread evenly by rank. Leftover slots split the widest
/// gaps of the grid itself.
pub fn default_offsets(scores: &Matrix, unseen_cols: &[bool], count: usize) -> Vec<f64> {
    let m = scores
        .data()
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let span = if m > 0.0 { 2.0 * m } else { 1.0 };
    if count < 2 {
        return vec![-span; count];
    }
    let best = |row: &[f64], unseen: bool| {
        row.iter()
            .zip(unseen_cols)
            .filter(|(_, u)| **u == unseen)
            .fold(f64::NEG_INFINITY, |acc, (v, _)| acc.max(*v))
    };
    let mut flips: Vec<f64> = (0..scores.rows())
        .map(|r| best(scores.row(r), false) - best(scores.row(r), true))
        .filter(|f| f.is_finite() && f.abs() < span)
        .collect();
    flips.sort_by(f64::total_cmp);
    flips.dedup();
    let mids: Vec<f64> = flips.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();

    let slots = count - 2;
    let mut grid = vec![-span];
    if mids.len() <= slots {
        grid.extend(&mids);
    } else if slots > 0 {
        // Half the slots go to the widest gaps between flip points (plateaus
        // such as a perfect separation), the rest are spread by rank.
        let mut by_width: Vec<usize> = (0..mids.len()).collect();
        by_width.sort_by(|&a, &b| (flips[b + 1] - flips[b]).total_cmp(&(flips[a + 1] - flips[a])).then(a.cmp(&b)));
        let mut chosen = vec![false; mids.len()];
        for &i in &by_width[..slots / 2] {
            chosen[i] = true;
        }
        let mut left = slots - slots / 2;
        // Walk ranks from an even spacing, skipping already chosen indices.
        let step = mids.len() as f64 / left as f64;
        let mut k = 0;
        while left > 0 && k < mids.len() {
            let i = ((k as f64 + 0.5) * step) as usize % mids.len();
            let j = (i..mids.len()).chain(0..i).find(|&j| !chosen[j]).expect("more mids than slots");
            chosen[j] = true;
            left -= 1;
            k += 1;
        }
        grid.extend(mids.iter().zip(&chosen).filter(|(_, c)| **c).map(|(m, _)| *m));
    }
    grid.push(span);
    while grid.len() < count {
        let (i, _) = grid
            .windows(2)
            .enumerate()
            .map(|(i, w)| (i, w[1] - w[0]))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        grid.insert(i + 1, 0.5 * (grid[i] + grid[i + 1]));
    }
    grid
}

/// Draws per-class feature pools and maps features into the comparison space.
pub trait FeatureSource {
    /// `count` features for dataset class `class` described by `descriptor`.
    fn generate_pool(&self, class: usize, descriptor: &[f64], count: usize, rng: &mut Rng) -> Result<Matrix>;

    fn embed(&self, x: &Matrix, space: EvalSpace) -> Result<Matrix>;

    /// Fails with both shapes when the dataset dimensions do not fit.
    fn check_compatible(&self, ds: &Dataset) -> Result<()>;
}

impl FeatureSource for Model {
    fn generate_pool(&self, _class: usize, descriptor: &[f64], count: usize, rng: &mut Rng) -> Result<Matrix> {
        let s = Matrix::from_fn(count, descriptor.len(), |_, j| descriptor[j]);
        let z = Matrix::from_fn(count, self.config.noise_dim, |_, _| StandardNormal.sample(rng));
        self.generate(&s, &z)
    }

    fn embed(&self, x: &Matrix, space: EvalSpace) -> Result<Matrix> {
        match space {
            EvalSpace::Phi => self.extract_phi(x),
            EvalSpace::Feature => Ok(x.clone()),
        }
    }

    fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        let want = Shape(self.config.descriptor_dim, self.config.feature_dim);
        let got = Shape(ds.descriptor_dim(), ds.feature_dim());
        if want != got {
            return Err(Error::dim("checkpoint vs bundle (descriptor x feature dims)", want, got));
        }
        Ok(())
    }
}

impl FeatureSource for Checkpoint {
    fn generate_pool(&self, class: usize, descriptor: &[f64], count: usize, rng: &mut Rng) -> Result<Matrix> {
        match self {
            Checkpoint::Gan(m) => m.generate_pool(class, descriptor, count, rng),
            Checkpoint::ClassMeans { means } => {
                if class >= means.rows() {
                    return Err(Error::Checkpoint(format!(
                        "class {class} has no stored mean ({} stored)",
                        means.rows()
                    )));
                }
                let row = means.row(class);
                Ok(Matrix::from_fn(count, means.cols(), |_, j| row[j]))
            }
        }
    }

    fn embed(&self, x: &Matrix, space: EvalSpace) -> Result<Matrix> {
        match self {
            Checkpoint::Gan(m) => m.embed(x, space),
            Checkpoint::ClassMeans { .. } => Ok(x.clone()),
        }
    }

    fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        match self {
            Checkpoint::Gan(m) => m.check_compatible(ds),
            Checkpoint::ClassMeans { means } => {
                let got = Shape(ds.num_classes(), ds.feature_dim());
                if means.shape() != got {
                    return Err(Error::dim("checkpoint vs bundle (classes x feature dims)", means.shape(), got));
                }
                Ok(())
            }
        }
    }
}

/// Per-class true means of a dataset, as an evaluation reference.
pub fn class_means(ds: &Dataset) -> Result<Matrix> {
    let mut means = Matrix::zeros(ds.num_classes(), ds.feature_dim());
    let mut counts = vec![0usize; ds.num_classes()];
    for (r, &l) in ds.labels().iter().enumerate() {
        counts[l] += 1;
        for (m, v) in means.row_mut(l).iter_mut().zip(ds.features().row(r)) {
            *m += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Dataset(format!("class {:?} has no rows", ds.class_ids()[c])));
        }
        for m in means.row_mut(c) {
            *m /= n as f64;
        }
    }
    Ok(means)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnResult {
    /// Index into the pool list for each query.
    pub predictions: Vec<usize>,
    /// `-min_j ||q - pool_c[j]||` per query and pool, queries x pools.
    pub scores: Matrix,
}

/// Nearest-neighbour classification against per-class pools. Ties go to the
/// lowest pool index.
pub fn nn_classify(pools: &[Matrix], queries: &Matrix) -> Result<NnResult> {
    if pools.is_empty() {
        return Err(Error::Config("nn_classify: no candidate classes".into()));
    }
    for (c, p) in pools.iter().enumerate() {
        if p.rows() == 0 {
            return Err(Error::Config(format!("nn_classify: empty pool for class {c}")));
        }
        if p.cols() != queries.cols() {
            return Err(Error::dim("nn_classify", p.shape(), queries.shape()));
        }
    }
    let mut scores = Matrix::zeros(queries.rows(), pools.len());
    for (q, x) in queries.iter_rows().enumerate() {
        for (c, pool) in pools.iter().enumerate() {
            let best = pool
                .iter_rows()
                .map(|y| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            scores.set(q, c, -best.sqrt());
        }
    }
    let predictions = (0..scores.rows()).map(|q| argmax(scores.row(q))).collect();
    Ok(NnResult { predictions, scores })
}

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over classes of the per-class hit rate. Classes without queries are
/// skipped; zero queries give 0.
pub fn per_class_accuracy(predictions: &[usize], truth: &[usize]) -> f64 {
    let mut hits = std::collections::BTreeMap::<usize, (usize, usize)>::new();
    for (&p, &t) in predictions.iter().zip(truth) {
        let e = hits.entry(t).or_default();
        e.0 += usize::from(p == t);
        e.1 += 1;
    }
    if hits.is_empty() {
        return 0.0;
    }
    hits.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / hits.len() as f64
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub offset: f64,
    pub seen: f64,
    pub unseen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuCurve {
    pub points: Vec<CurvePoint>,
    pub auc: f64,
}

impl SuCurve {
    /// Curve point with the largest harmonic mean (first on ties).
    pub fn best_h(&self) -> CurvePoint {
        let mut best = self.points[0];
        for p in &self.points[1..] {
            if harmonic_mean(p.seen, p.unseen) > harmonic_mean(best.seen, best.unseen) {
                best = *p;
            }
        }
        best
    }
}

/// Trapezoid area under the (S, U) points taken in sweep order, clamped to
/// the unit square against rounding.
pub fn trapezoid_auc(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[0].seen - w[1].seen).abs() * (w[0].unseen + w[1].unseen) / 2.0)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Calibrated seen/unseen sweep over a joint score matrix.
///
/// `scores` has one column per candidate class; `unseen_cols` marks the
/// columns that receive the offset. Rows of `seen_truth` and `unseen_truth`
/// give the true column of the seen-test and unseen-test queries, which
/// occupy the first and last rows of `scores` respectively.
pub fn seen_unseen_sweep(
    scores: &Matrix,
    unseen_cols: &[bool],
    seen_truth: &[usize],
    unseen_truth: &[usize],
    offsets: &[f64],
) -> Result<SuCurve> {
    if seen_truth.is_empty() || unseen_truth.is_empty() {
        return Err(Error::Dataset("seen/unseen curve needs both seen and unseen test rows".into()));
    }
    if scores.rows() != seen_truth.len() + unseen_truth.len() || scores.cols() != unseen_cols.len() {
        return Err(Error::dim(
            "seen_unseen_sweep",
            scores.shape(),
            Shape(seen_truth.len() + unseen_truth.len(), unseen_cols.len()),
        ));
    }
    if offsets.is_empty() {
        return Err(Error::Config("no calibration offsets".into()));
    }
    let n_seen = seen_truth.len();
    let mut shifted = vec![0.0; scores.cols()];
    let points = offsets
        .iter()
        .map(|&offset| {
            let predictions: Vec<usize> = (0..scores.rows())
                .map(|q| {
                    for (c, v) in scores.row(q).iter().enumerate() {
                        shifted[c] = if unseen_cols[c] { v + offset } else { *v };
                    }
                    argmax(&shifted)
                })
                .collect();
            CurvePoint {
                offset,
                seen: per_class_accuracy(&predictions[..n_seen], seen_truth),
                unseen: per_class_accuracy(&predictions[n_seen..], unseen_truth),
            }
        })
        .collect::<Vec<_>>();
    Ok(SuCurve {
        auc: trapezoid_auc(&points),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_unseen: f64,
    pub curve: Vec<CurvePoint>,
    pub auc: f64,
    pub s_best: f64,
    pub u_best: f64,
    pub h_best: f64,
}

impl EvalReport {
    /// `key,value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "metric,value\ntop1_unseen,{:.6}\nsu_auc,{:.6}\ns_best,{:.6}\nu_best,{:.6}\nh_best,{:.6}\ncurve_points,{}\n",
            self.top1_unseen,
            self.auc,
            self.s_best,
            self.u_best,
            self.h_best,
            self.curve.len()
        )
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("offset,S,U\n");
        for p in &self.curve {
            out.push_str(&format!("{:.9e},{:.6},{:.6}\n", p.offset, p.seen, p.unseen));
        }
        out
    }
}

/// Pools for `classes`, embedded, in the order given.
pub fn class_pools<S: FeatureSource + ?Sized>(
    source: &S,
    ds: &Dataset,
    classes: &[usize],
    cfg: &EvalConfig,
    rng: &mut Rng,
) -> Result<Vec<Matrix>> {
    classes
        .iter()
        .map(|&c| {
            let pool = source.generate_pool(c, ds.descriptors().row(c), cfg.gen_per_class, rng)?;
            source.embed(&pool, cfg.space)
        })
        .collect()
}

/// Top-1 accuracy of unseen test rows classified among unseen classes only.
pub fn top1_unseen<S: FeatureSource + ?Sized>(
    source: &S,
    ds: &Dataset,
    holdout: &Holdout,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    source.check_compatible(ds)?;
    let unseen = ds.unseen_classes();
    let pools = class_pools(source, ds, &unseen, cfg, &mut stream(seed, 0xe7a1))?;
    unseen_top1_from_pools(source, ds, holdout, cfg, &unseen, &pools)
}

fn unseen_top1_from_pools<S: FeatureSource + ?Sized>(
    source: &S,
    ds: &Dataset,
    holdout: &Holdout,
    cfg: &EvalConfig,
    unseen: &[usize],
    pools: &[Matrix],
) -> Result<f64> {
    if holdout.unseen_test.is_empty() {
        return Err(Error::Dataset("no unseen test rows".into()));
    }
    let queries = source.embed(&ds.features().select_rows(&holdout.unseen_test)?, cfg.space)?;
    let nn = nn_classify(pools, &queries)?;
    let truth = local_truth(ds, &holdout.unseen_test, unseen)?;
    Ok(per_class_accuracy(&nn.predictions, &truth))
}

fn local_truth(ds: &Dataset, rows: &[usize], classes: &[usize]) -> Result<Vec<usize>> {
    rows.iter()
        .map(|&r| {
            let l = ds.labels()[r];
            classes
                .iter()
                .position(|&c| c == l)
                .ok_or_else(|| Error::Dataset(format!("row {:?} outside candidate classes", ds.row_ids()[r])))
        })
        .collect()
}

/// Calibrated GZSL curve over all classes (seen columns first).
pub fn seen_unseen_curve<S: FeatureSource + ?Sized>(
    source: &S,
    ds: &Dataset,
    holdout: &Holdout,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<SuCurve> {
    Ok(evaluate(source, ds, holdout, cfg, seed)?.1)
}

fn evaluate<S: FeatureSource + ?Sized>(
    source: &S,
    ds: &Dataset,
    holdout: &Holdout,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(f64, SuCurve)> {
    cfg.validate()?;
    source.check_compatible(ds)?;
    if holdout.seen_test.is_empty() || holdout.unseen_test.is_empty() {
        return Err(Error::Dataset("evaluation needs both seen and unseen test rows".into()));
    }
    let seen = ds.seen_classes();
    let unseen = ds.unseen_classes();
    let mut rng = stream(seed, 0xe7a1);
    let unseen_pools = class_pools(source, ds, &unseen, cfg, &mut rng)?;
    let seen_pools = class_pools(source, ds, &seen, cfg, &mut rng)?;
    let top1 = unseen_top1_from_pools(source, ds, holdout, cfg, &unseen, &unseen_pools)?;

    let all: Vec<usize> = seen.iter().chain(&unseen).copied().collect();
    let pools: Vec<Matrix> = seen_pools.into_iter().chain(unseen_pools).collect();
    let rows: Vec<usize> = holdout.seen_test.iter().chain(&holdout.unseen_test).copied().collect();
    let queries = source.embed(&ds.features().select_rows(&rows)?, cfg.space)?;
    let nn = nn_classify(&pools, &queries)?;
    let seen_truth = local_truth(ds, &holdout.seen_test, &all)?;
    let unseen_truth = local_truth(ds, &holdout.unseen_test, &all)?;
    let unseen_cols: Vec<bool> = (0..all.len()).map(|i| i >= seen.len()).collect();
    let offsets = match &cfg.offsets {
        Some(o) => o.clone(),
        None => default_offsets(&nn.scores, &unseen_cols, cfg.num_offsets),
    };
    let curve = seen_unseen_sweep(&nn.scores, &unseen_cols, &seen_truth, &unseen_truth, &offsets)?;
    Ok((top1, curve))
}

/// Top-1, curve, AUC and best-H point in one pass with shared pools.
pub fn evaluate_report<S: FeatureSource + ?Sized>(
    source: &S,
    ds: &Dataset,
    holdout: &Holdout,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let (top1, curve) = evaluate(source, ds, holdout, cfg, seed)?;
    let best = curve.best_h();
    Ok(EvalReport {
        top1_unseen: top1,
        auc: curve.auc,
        s_best: best.seen,
        u_best: best.unseen,
        h_best: harmonic_mean(best.seen, best.unseen),
        curve: curve.points,
    })
}
