//! Finite-difference suite over every gradient the trainer relies on.

use grawd::data::{synthesize, SyntheticSpec, TrainingView};
use grawd::grad::{fault, finite_diff_check, max_relative_error, numeric_gradient, Matrix, Parameter, Tape};
use grawd::model::Model;
use grawd::rng::{normal_matrix, stream};
use grawd::train::{
    critic_loss, generator_loss, gradient_penalty, gradient_penalty_between, Batch, DeviationMode,
    GeneratorContext, HallucinationSampler, TrainConfig, Trainer,
};
use grawd::walk::{walk_loss_from_features, TargetMode, WalkConfig};
use grawd::Result;

use crate::config::Fault;
use crate::{CliError, CliResult};

pub const STEP: f64 = 1e-5;
pub const WALK_THRESHOLD: f64 = 1e-5;
pub const NETWORK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed()).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("check,max_rel_err,threshold,status\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{:.3e},{:.0e},{}\n",
                c.name,
                c.max_rel_err,
                c.threshold,
                if c.passed() { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Resets the fault switch when dropped.
struct FaultGuard;

impl Drop for FaultGuard {
    fn drop(&mut self) {
        let _ = fault::set_softmax_sign_flip(false);
    }
}

fn tiny_config(mode: DeviationMode) -> TrainConfig {
    TrainConfig {
        noise_dim: 3,
        generator_hidden: vec![6],
        critic_hidden: 6,
        batch_size: 6,
        n_u: Some(4),
        n_critic: 1,
        epochs: 1,
        walk: WalkConfig {
            steps: 3,
            ..WalkConfig::default()
        },
        deviation_mode: mode,
        ..TrainConfig::default()
    }
}

fn tiny_view(seed: u64) -> Result<TrainingView> {
    let ds = synthesize(&SyntheticSpec {
        num_seen: 3,
        num_unseen: 1,
        feature_dim: 4,
        descriptor_dim: 3,
        samples_per_class: 4,
        noise_scale: 0.3,
        seed,
    })?;
    TrainingView::all_seen(&ds)
}

fn tiny_batch(view: &TrainingView, cfg: &TrainConfig, seed: u64) -> Result<Batch> {
    let mut sampler = HallucinationSampler::new(view.seen_descriptors().clone(), 0.2, 0.8, stream(seed, 11))?;
    let rows: Vec<usize> = (0..cfg.batch_size).map(|i| (i * 5) % view.len()).collect();
    Batch::sample(view, &rows, cfg.n_u(), cfg.noise_dim, &mut sampler, &mut stream(seed, 12))
}

/// Max error over parameters of `analytic` against central differences of
/// `value`, where `params` picks the parameter list to perturb.
fn parameter_error(
    model: &Model,
    analytic: &[Matrix],
    params: impl Fn(&mut Model) -> Vec<&mut Parameter>,
    value: impl Fn(&Model) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let current: Vec<Matrix> = params(&mut model.clone()).into_iter().map(|p| p.value.clone()).collect();
    for (i, x) in current.iter().enumerate() {
        let numeric = numeric_gradient(
            |v| {
                let mut probe = model.clone();
                params(&mut probe)[i].value = v.clone();
                value(&probe)
            },
            x,
            STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic[i], &numeric)?);
    }
    Ok(worst)
}

fn walk_checks(seed: u64, checks: &mut Vec<Check>) -> Result<()> {
    let x_u = normal_matrix(&mut stream(seed, 21), 5, 3, 1.0);
    let centers = normal_matrix(&mut stream(seed, 22), 3, 3, 1.0);
    for (target, label) in [(TargetMode::Uniform, "grawd"), (TargetMode::Identity, "grawt")] {
        for steps in [0, 1, 3, 10] {
            let cfg = WalkConfig {
                steps,
                gamma: 0.7,
                target,
                ..WalkConfig::default()
            };
            let c = &centers;
            let wrt_x = finite_diff_check(
                |tape, x| walk_loss_from_features(x, tape.constant(c.clone()), &cfg).map(|l| l.total),
                &x_u,
                STEP,
            )?;
            let x = &x_u;
            let wrt_c = finite_diff_check(
                |tape, c| walk_loss_from_features(tape.constant(x.clone()), c, &cfg).map(|l| l.total),
                &centers,
                STEP,
            )?;
            for (input, err) in [("x_u", wrt_x), ("centers", wrt_c)] {
                checks.push(Check {
                    name: format!("walk_{label}_t{steps}/{input}"),
                    max_rel_err: err,
                    threshold: WALK_THRESHOLD,
                });
            }
        }
    }
    Ok(())
}

fn generator_checks(seed: u64, view: &TrainingView, checks: &mut Vec<Check>) -> Result<()> {
    for mode in [DeviationMode::Grawd, DeviationMode::Grawt, DeviationMode::ExtraClass] {
        let cfg = TrainConfig { seed, ..tiny_config(mode) };
        let model = Trainer::new(view, cfg.clone())?.model;
        let batch = tiny_batch(view, &cfg, seed)?;
        let ctx = GeneratorContext {
            seen_descriptors: view.seen_descriptors(),
            memory: None,
        };
        let eval = |m: &Model, trainable: bool| -> Result<(f64, Vec<Matrix>)> {
            let tape = Tape::new();
            let g = m.generator.bind(&tape, trainable);
            let d = m.discriminator.bind(&tape, false);
            let loss = generator_loss(&tape, &g, &d, &ctx, &batch, &cfg)?.total;
            if !trainable {
                return Ok((loss.item(), Vec::new()));
            }
            let grads = tape.backward(loss)?;
            let mut m = m.clone();
            m.generator.store_grads(&g, &grads)?;
            Ok((loss.item(), m.generator.parameters().map(Parameter::grad).collect()))
        };
        let (_, analytic) = eval(&model, true)?;
        let err = parameter_error(
            &model,
            &analytic,
            |m| m.generator.parameters_mut().collect(),
            |m| Ok(eval(m, false)?.0),
        )?;
        checks.push(Check {
            name: format!("generator_loss_{}/theta_g", mode.as_str()),
            max_rel_err: err,
            threshold: NETWORK_THRESHOLD,
        });
    }
    Ok(())
}

fn critic_checks(seed: u64, view: &TrainingView, checks: &mut Vec<Check>) -> Result<()> {
    for mode in [DeviationMode::Grawd, DeviationMode::ExtraClass] {
        let cfg = TrainConfig { seed, ..tiny_config(mode) };
        let model = Trainer::new(view, cfg.clone())?.model;
        let batch = tiny_batch(view, &cfg, seed)?;
        let eval = |m: &Model, trainable: bool| -> Result<(f64, Vec<Matrix>)> {
            let tape = Tape::new();
            let g = m.generator.bind(&tape, false);
            let d = m.discriminator.bind(&tape, trainable);
            let loss = critic_loss(&tape, &g, &d, view.seen_descriptors(), &batch, &cfg)?.total;
            if !trainable {
                return Ok((loss.item(), Vec::new()));
            }
            let grads = tape.backward(loss)?;
            let mut m = m.clone();
            m.discriminator.store_grads(&d, &grads)?;
            Ok((loss.item(), m.discriminator.parameters().map(Parameter::grad).collect()))
        };
        let (_, analytic) = eval(&model, true)?;
        let err = parameter_error(
            &model,
            &analytic,
            |m| m.discriminator.parameters_mut().collect(),
            |m| Ok(eval(m, false)?.0),
        )?;
        checks.push(Check {
            name: format!("critic_loss_{}/theta_d", mode.as_str()),
            max_rel_err: err,
            threshold: NETWORK_THRESHOLD,
        });
    }
    Ok(())
}

fn penalty_checks(seed: u64, view: &TrainingView, checks: &mut Vec<Check>) -> Result<()> {
    let cfg = TrainConfig { seed, ..tiny_config(DeviationMode::Grawd) };
    let model = Trainer::new(view, cfg)?.model;
    let dim = view.features().cols();
    let real = normal_matrix(&mut stream(seed, 31), 4, dim, 1.0);
    let fake = normal_matrix(&mut stream(seed, 32), 4, dim, 1.0);
    let mix = Matrix::from_fn(4, 1, |i, _| 0.15 + 0.2 * i as f64);
    let eval = |m: &Model, trainable: bool| -> Result<(f64, Vec<Matrix>)> {
        let tape = Tape::new();
        let d = m.discriminator.bind(&tape, trainable);
        let p = gradient_penalty_between(&tape, &real, &fake, &mix, &d)?;
        if !trainable {
            return Ok((p.item(), Vec::new()));
        }
        let grads = tape.backward(p)?;
        let mut m = m.clone();
        m.discriminator.store_grads(&d, &grads)?;
        Ok((p.item(), m.discriminator.parameters().map(Parameter::grad).collect()))
    };
    let (_, analytic) = eval(&model, true)?;
    let err = parameter_error(
        &model,
        &analytic,
        |m| m.discriminator.parameters_mut().collect(),
        |m| Ok(eval(m, false)?.0),
    )?;
    checks.push(Check {
        name: "gradient_penalty/theta_d".into(),
        max_rel_err: err,
        threshold: NETWORK_THRESHOLD,
    });
    // The critic is piecewise linear in its input, so a smooth term is added
    // to give the penalty a non-zero input gradient.
    let wrt_input = finite_diff_check(
        |tape, x| {
            let d = model.discriminator.bind(tape, false);
            gradient_penalty(x, |v| d.real_score(v)?.add(v.square()?.row_sum()?.scale(0.3)?))
        },
        &real,
        STEP,
    )?;
    checks.push(Check {
        name: "gradient_penalty/input".into(),
        max_rel_err: wrt_input,
        threshold: NETWORK_THRESHOLD,
    });
    Ok(())
}

/// Runs every check on small instances derived from `seed`.
pub fn run_suite(seed: u64, inject: Fault) -> CliResult<Report> {
    let _guard = FaultGuard;
    if inject == Fault::SoftmaxSign {
        fault::set_softmax_sign_flip(true).map_err(|e| CliError::usage(e.to_string()))?;
    }
    let view = tiny_view(seed)?;
    let mut checks = Vec::new();
    walk_checks(seed, &mut checks)?;
    generator_checks(seed, &view, &mut checks)?;
    critic_checks(seed, &view, &mut checks)?;
    penalty_checks(seed, &view, &mut checks)?;
    Ok(Report { checks })
}
