#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;

use super::*;
use crate::grad::{max_relative_error, numeric_gradient, Tape};
use crate::rng::{normal_matrix, seeded};

fn rand_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    normal_matrix(&mut seeded(seed), rows, cols, 1.0)
}

fn cfg(steps: usize, target: TargetMode) -> WalkConfig {
    WalkConfig {
        steps,
        target,
        ..WalkConfig::default()
    }
}

/// Plain nested-vector reimplementation of the whole loss. Shares no code
/// with the tape path.
mod oracle {
    pub type M = Vec<Vec<f64>>;

    pub fn to_rows(m: &crate::grad::Matrix) -> M {
        m.iter_rows().map(|r| r.to_vec()).collect()
    }

    fn sqdist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    pub fn softmax(m: &M) -> M {
        m.iter()
            .map(|row| {
                let max = row.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    fn transpose(m: &M) -> M {
        (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
    }

    fn matmul(a: &M, b: &M) -> M {
        a.iter()
            .map(|r| {
                (0..b[0].len())
                    .map(|j| r.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    pub struct Parts {
        pub c2x: M,
        pub x2c: M,
        pub x2x: M,
    }

    pub fn transitions(x: &M, c: &M, diag: f64) -> Parts {
        let a: M = (0..x.len())
            .map(|i| {
                (0..x.len())
                    .map(|j| if i == j { diag } else { -sqdist(&x[i], &x[j]) })
                    .collect()
            })
            .collect();
        let b: M = x
            .iter()
            .map(|xi| c.iter().map(|cj| -sqdist(xi, cj)).collect())
            .collect();
        Parts {
            c2x: softmax(&transpose(&b)),
            x2c: softmax(&b),
            x2x: softmax(&a),
        }
    }

    /// Sum over every generation path of the product of hop probabilities.
    pub fn landing_by_paths(p: &Parts, t: usize) -> M {
        let k = p.c2x.len();
        let n = p.x2x.len();
        let mut out = vec![vec![0.0; k]; k];
        let mut path = vec![0usize; t + 1];
        loop {
            for i in 0..k {
                for j in 0..k {
                    let mut prob = p.c2x[i][path[0]];
                    for s in 0..t {
                        prob *= p.x2x[path[s]][path[s + 1]];
                    }
                    out[i][j] += prob * p.x2c[path[t]][j];
                }
            }
            // odometer over generation indices
            let mut pos = 0;
            loop {
                if pos > t {
                    return out;
                }
                path[pos] += 1;
                if path[pos] < n {
                    break;
                }
                path[pos] = 0;
                pos += 1;
            }
        }
    }

    pub fn loss(x: &M, c: &M, steps: usize, gamma: f64, diag: f64, attraction: bool) -> (f64, f64) {
        let p = transitions(x, c, diag);
        let k = c.len();
        let mut deviation = 0.0;
        let mut walk = p.c2x.clone();
        for t in 0..=steps {
            if t > 0 {
                walk = matmul(&walk, &p.x2x);
            }
            let land = matmul(&walk, &p.x2c);
            let mut ce = 0.0;
            for (i, row) in land.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let target = if attraction {
                        if i == j { 1.0 } else { 0.0 }
                    } else {
                        1.0 / k as f64
                    };
                    ce -= target * v.max(1e-30).ln();
                }
            }
            deviation += gamma.powi(t as i32) * ce;
        }
        let n = x.len();
        let mut visit = 0.0;
        for j in 0..n {
            let pv: f64 = (0..k).map(|i| p.c2x[i][j]).sum::<f64>() / k as f64;
            visit -= pv.max(1e-30).ln() / n as f64;
        }
        (deviation, visit)
    }
}

fn evaluate(x: &Matrix, c: &Matrix, cfg: &WalkConfig) -> WalkLossReport {
    let tape = Tape::new();
    walk_loss_from_features(tape.var(x.clone()), tape.var(c.clone()), cfg)
        .unwrap()
        .report()
}

#[test]
fn similarity_examples() {
    let tape = Tape::new();
    let cfg = WalkConfig::default();
    let twins = tape.var(Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap());
    let centers = tape.var(Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0]]).unwrap());
    let (a, _) = build_similarities(twins, centers, &cfg).unwrap();
    assert_eq!(a.value().data(), &[-1e9, 0.0, 0.0, -1e9]);

    let origin = tape.var(Matrix::from_rows(&[[0.0, 0.0]]).unwrap());
    let (_, b) = build_similarities(origin, centers, &cfg).unwrap();
    assert_eq!(b.value().data(), &[-25.0, 0.0]);
}

#[test]
fn similarities_match_loop_oracle() {
    let tape = Tape::new();
    let x = rand_matrix(1, 4, 3);
    let c = rand_matrix(2, 3, 3);
    let cfg = WalkConfig::default();
    let (a, b) = build_similarities(tape.var(x.clone()), tape.var(c.clone()), &cfg).unwrap();
    let (a, b) = (a.value(), b.value());
    for i in 0..4 {
        for j in 0..4 {
            let expected = if i == j {
                cfg.diag_fill
            } else {
                -(0..3).map(|k| (x.get(i, k) - x.get(j, k)).powi(2)).sum::<f64>()
            };
            assert!((a.get(i, j) - expected).abs() < 1e-12);
        }
        for j in 0..3 {
            let expected = -(0..3).map(|k| (x.get(i, k) - c.get(j, k)).powi(2)).sum::<f64>();
            assert!((b.get(i, j) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn similarity_errors() {
    let tape = Tape::new();
    let cfg = WalkConfig::default();
    let x = tape.var(Matrix::zeros(3, 2));
    let one_center = tape.var(Matrix::zeros(1, 2));
    assert!(matches!(
        build_similarities(x, one_center, &cfg),
        Err(Error::Degenerate { .. })
    ));
    let wrong_dim = tape.var(Matrix::zeros(2, 3));
    assert!(matches!(
        build_similarities(x, wrong_dim, &cfg),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn diagonal_fill_removes_self_transitions() {
    let tape = Tape::new();
    let x = tape.var(rand_matrix(3, 5, 4).scale(3.0));
    let c = tape.var(rand_matrix(4, 3, 4));
    let (a, b) = build_similarities(x, c, &WalkConfig::default()).unwrap();
    let p = make_transitions(a, b).unwrap().x2x.value();
    for i in 0..5 {
        assert!(p.get(i, i) < 1e-100);
    }
}

#[test]
fn transition_examples() {
    let tape = Tape::new();
    let a = tape.var(rand_matrix(5, 3, 3));
    let b = tape.var(Matrix::filled(3, 4, -2.5));
    let bundle = make_transitions(a, b).unwrap();
    for &v in bundle.x2c.value().data() {
        assert!((v - 0.25).abs() < 1e-15);
    }

    let single = make_transitions(
        tape.var(Matrix::scalar(-1e9)),
        tape.var(Matrix::from_rows(&[[-1.0, -2.0]]).unwrap()),
    )
    .unwrap();
    assert_eq!(single.x2x.value().data(), &[1.0]);

    let x = tape.var(rand_matrix(6, 7, 3));
    let c = tape.var(rand_matrix(7, 4, 3));
    let (a, b) = build_similarities(x, c, &WalkConfig::default()).unwrap();
    let bundle = make_transitions(a, b).unwrap();
    for p in [bundle.c2x, bundle.x2c, bundle.x2x] {
        assert!(p.value().max_row_sum_error() <= 1e-12);
    }

    let bad = tape.var(Matrix::zeros(2, 3));
    assert!(make_transitions(bad, b).is_err());
}

#[test]
fn landing_with_uniform_hops_is_uniform() {
    let tape = Tape::new();
    let a = tape.var(rand_matrix(8, 4, 4));
    let b = tape.var(Matrix::zeros(4, 3));
    let bundle = make_transitions(a, b).unwrap();
    let land = landing_probability(&bundle, 0).unwrap().value();
    for &v in land.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn landing_matches_path_enumeration_k3_n4_t2() {
    let x = rand_matrix(9, 4, 3);
    let c = rand_matrix(10, 3, 3);
    let tape = Tape::new();
    let (a, b) = build_similarities(tape.var(x.clone()), tape.var(c.clone()), &WalkConfig::default()).unwrap();
    let land = landing_probability(&make_transitions(a, b).unwrap(), 2).unwrap().value();
    let expected = oracle::landing_by_paths(
        &oracle::transitions(&oracle::to_rows(&x), &oracle::to_rows(&c), -1e9),
        2,
    );
    for i in 0..3 {
        for j in 0..3 {
            assert!((land.get(i, j) - expected[i][j]).abs() < 1e-10);
        }
    }
}

#[test]
fn landing_rows_stochastic_up_to_twenty_steps() {
    let tape = Tape::new();
    let x = tape.var(rand_matrix(11, 6, 3));
    let c = tape.var(rand_matrix(12, 4, 3));
    let (a, b) = build_similarities(x, c, &WalkConfig::default()).unwrap();
    let bundle = make_transitions(a, b).unwrap();
    for p in landing_sequence(&bundle, 20).unwrap() {
        assert!(p.value().max_row_sum_error() <= 1e-9);
    }
}

/// Two centers at (+-1, 0) and two generations at (0, +-1): every hop is
/// uniform.
fn symmetric_instance() -> (Matrix, Matrix) {
    (
        Matrix::from_rows(&[[0.0, 1.0], [0.0, -1.0]]).unwrap(),
        Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap(),
    )
}

#[test]
fn uniform_closed_form() {
    let (x, c) = symmetric_instance();
    let r0 = evaluate(&x, &c, &cfg(0, TargetMode::Uniform));
    assert!((r0.deviation - 2.0 * 2f64.ln()).abs() < 1e-9);
    assert!((r0.deviation - 1.386294).abs() < 1e-6);
    assert!((r0.visit - 2f64.ln()).abs() < 1e-12);
    assert!((r0.total - r0.deviation - r0.visit).abs() < 1e-15);
    let r1 = evaluate(&x, &c, &cfg(1, TargetMode::Uniform));
    assert!((r1.deviation - 1.7 * 2.0 * 2f64.ln()).abs() < 1e-9);
    assert!((r1.deviation - 2.356701).abs() < 1e-6);

    // GRaWT coincides when landing is uniform.
    let t0 = evaluate(&x, &c, &cfg(0, TargetMode::Identity));
    assert!((t0.deviation - r0.deviation).abs() < 1e-12);
}

#[test]
fn uniform_visit_is_log_n() {
    let tape = Tape::new();
    let c2x = tape.var(Matrix::filled(3, 5, 0.2));
    let pv = visit_distribution(c2x).unwrap().value();
    assert!(pv.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn unvisited_generation_drives_visit_loss_up() {
    let tape = Tape::new();
    let c2x = tape.var(Matrix::from_rows(&[[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]]).unwrap());
    let pv = visit_distribution(c2x).unwrap();
    assert_eq!(pv.value().get(0, 2), 0.0);
    let loss = cross_entropy_rows(pv, &Matrix::filled(1, 3, 1.0 / 3.0)).unwrap().item();
    assert!(loss > 20.0, "{loss}");

    let x = tape.var(rand_matrix(13, 4, 3));
    let c = tape.var(rand_matrix(14, 3, 3));
    let (a, b) = build_similarities(x, c, &WalkConfig::default()).unwrap();
    let bundle = make_transitions(a, b).unwrap();
    let pv = visit_distribution(bundle.c2x).unwrap().value();
    assert!((pv.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn attraction_with_perfect_return_is_zero() {
    let tape = Tape::new();
    // Generations sit on the centers, far apart: every walk returns home.
    let c = Matrix::from_rows(&[[0.0, 0.0], [100.0, 0.0]]).unwrap();
    let x = Matrix::from_rows(&[[0.0, 0.0], [100.0, 0.0]]).unwrap();
    for steps in [0, 1, 3] {
        let loss = walk_loss_from_features(
            tape.var(x.clone()),
            tape.var(c.clone()),
            &cfg(steps, TargetMode::Identity),
        );
        // With two generations the inner step always swaps sides, so look
        // at the even-step terms individually.
        let report = loss.unwrap().report();
        for (t, land) in report.landing.iter().enumerate() {
            let ce: f64 = -(0..2).map(|i| land.get(i, i).max(1e-30).ln()).sum::<f64>();
            if t % 2 == 0 {
                assert!(ce <= 2.0 * 1e-12, "t={t} ce={ce}");
            }
        }
    }
    // With three generations per side the walk can stay home on every step.
    let x = Matrix::from_rows(&[
        [0.0, 0.0],
        [0.0, 0.1],
        [100.0, 0.0],
        [100.0, 0.1],
    ])
    .unwrap();
    let report = walk_loss_from_features(tape.var(x), tape.var(c), &cfg(3, TargetMode::Identity))
        .unwrap()
        .report();
    assert!(report.deviation <= 2.0 * 1e-12, "{}", report.deviation);
}

#[test]
fn loss_matches_independent_scalar_oracle() {
    for seed in 0..5 {
        let x = rand_matrix(100 + seed, 5, 3);
        let c = rand_matrix(200 + seed, 3, 3);
        for (target, attraction) in [(TargetMode::Uniform, false), (TargetMode::Identity, true)] {
            let config = cfg(4, target);
            let report = evaluate(&x, &c, &config);
            let (dev, visit) = oracle::loss(
                &oracle::to_rows(&x),
                &oracle::to_rows(&c),
                4,
                0.7,
                -1e9,
                attraction,
            );
            assert!((report.deviation - dev).abs() < 1e-10, "{} vs {dev}", report.deviation);
            assert!((report.visit - visit).abs() < 1e-10);
        }
    }
}

#[test]
fn deviation_attains_bound_only_when_uniform() {
    let (x, c) = symmetric_instance();
    let config = cfg(2, TargetMode::Uniform);
    let bound: f64 = (0..=2).map(|t| 0.7f64.powi(t) * 2.0 * 2f64.ln()).sum();
    assert!((evaluate(&x, &c, &config).deviation - bound).abs() < 1e-12);
    for seed in 0..10 {
        let x = rand_matrix(300 + seed, 4, 2);
        let report = evaluate(&x, &c, &config);
        assert!(report.deviation > bound);
    }
}

fn grad_wrt(x: &Matrix, c: &Matrix, config: &WalkConfig, wrt_x: bool) -> (Matrix, Matrix) {
    let tape = Tape::new();
    let (xv, cv) = (tape.var(x.clone()), tape.var(c.clone()));
    let loss = walk_loss_from_features(xv, cv, config).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    let analytic = if wrt_x { grads.get(xv) } else { grads.get(cv) };
    let numeric = numeric_gradient(
        |p| {
            let (px, pc) = if wrt_x { (p, c) } else { (x, p) };
            Ok(evaluate(px, pc, config).total)
        },
        if wrt_x { x } else { c },
        1e-5,
    )
    .unwrap();
    (analytic, numeric)
}

#[test]
fn gradients_match_finite_differences() {
    for steps in [0, 1, 3, 10] {
        for seed in 0..10 {
            let x = rand_matrix(400 + seed, 5, 3);
            let c = rand_matrix(500 + seed, 3, 3);
            for target in [TargetMode::Uniform, TargetMode::Identity] {
                let config = cfg(steps, target);
                for wrt_x in [true, false] {
                    let (a, n) = grad_wrt(&x, &c, &config, wrt_x);
                    let err = max_relative_error(&a, &n).unwrap();
                    assert!(err < 1e-5, "T={steps} seed={seed} {target:?} x={wrt_x}: {err}");
                }
            }
        }
    }
}

#[test]
fn permuting_generations_permutes_gradients() {
    let x = rand_matrix(600, 5, 3);
    let c = rand_matrix(601, 3, 3);
    let perm = [3usize, 0, 4, 1, 2];
    let xp = x.select_rows(&perm).unwrap();
    let config = cfg(3, TargetMode::Uniform);
    let run = |m: &Matrix| {
        let tape = Tape::new();
        let xv = tape.var(m.clone());
        let loss = walk_loss_from_features(xv, tape.var(c.clone()), &config).unwrap();
        let value = loss.total.item();
        (value, tape.backward(loss.total).unwrap().get(xv))
    };
    let (l0, g0) = run(&x);
    let (l1, g1) = run(&xp);
    assert!((l0 - l1).abs() < 1e-12);
    assert!(g0.select_rows(&perm).unwrap().max_abs_diff(&g1).unwrap() < 1e-12);
}

/// Generations clustered near the first of two centers, slightly offset.
fn lopsided_instance() -> (Matrix, Matrix) {
    let c = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
    let x = Matrix::from_rows(&[[0.8, 0.3], [0.9, -0.2], [0.6, 0.1], [-0.7, 0.2]]).unwrap();
    (x, c)
}

fn nearest_center_projection(x: &Matrix, c: &Matrix, grad: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let xi = x.row(i);
        let nearest = (0..c.rows())
            .min_by(|&p, &q| {
                let d = |k: usize| c.row(k).iter().zip(xi).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                d(p).total_cmp(&d(q))
            })
            .unwrap();
        total += c.row(nearest).iter().zip(xi).zip(grad.row(i)).map(|((cv, xv), g)| (cv - xv) * g).sum::<f64>();
    }
    total
}

fn deviation_grad(x: &Matrix, c: &Matrix, target: TargetMode) -> Matrix {
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = walk_loss_from_features(xv, tape.var(c.clone()), &cfg(0, target)).unwrap();
    tape.backward(loss.deviation).unwrap().get(xv)
}

#[test]
fn deviation_and_attraction_pull_opposite_ways() {
    let (x, c) = lopsided_instance();
    let grawd = deviation_grad(&x, &c, TargetMode::Uniform);
    let grawt = deviation_grad(&x, &c, TargetMode::Identity);
    // Descent is -grad: attraction moves toward the nearest center, deviation away.
    assert!(nearest_center_projection(&x, &c, &grawt) < 0.0);
    assert!(nearest_center_projection(&x, &c, &grawd) > 0.0);
}

#[test]
fn one_gradient_step_moves_as_expected() {
    let (x, c) = lopsided_instance();
    let step = 0.05;
    let dist_to_nearest = |m: &Matrix| -> f64 {
        m.iter_rows()
            .map(|r| {
                c.iter_rows()
                    .map(|cr| cr.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    let min_entropy = |m: &Matrix| -> f64 {
        let land = &evaluate(m, &c, &cfg(0, TargetMode::Uniform)).landing[0];
        land.iter_rows()
            .map(|r| -r.iter().map(|p| p * p.ln()).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    };
    let grawt = deviation_grad(&x, &c, TargetMode::Identity);
    let moved = x.sub(&grawt.scale(step)).unwrap();
    assert!(dist_to_nearest(&moved) < dist_to_nearest(&x));

    let grawd = deviation_grad(&x, &c, TargetMode::Uniform);
    let moved = x.sub(&grawd.scale(step)).unwrap();
    assert!(min_entropy(&moved) > min_entropy(&x));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn landing_equals_path_enumeration(seed in 0u64..10_000, k in 2usize..=4, n in 1usize..=5, t in 0usize..=3) {
        let x = rand_matrix(seed, n, 3);
        let c = rand_matrix(seed + 77, k, 3);
        let tape = Tape::new();
        let (a, b) = build_similarities(tape.var(x.clone()), tape.var(c.clone()), &WalkConfig::default()).unwrap();
        let land = landing_probability(&make_transitions(a, b).unwrap(), t).unwrap().value();
        let expected = oracle::landing_by_paths(
            &oracle::transitions(&oracle::to_rows(&x), &oracle::to_rows(&c), -1e9), t);
        for i in 0..k {
            for j in 0..k {
                prop_assert!((land.get(i, j) - expected[i][j]).abs() < 1e-10);
            }
        }
    }
}
