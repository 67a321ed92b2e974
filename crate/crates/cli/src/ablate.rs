//! Arm sweeps: each arm is a deviation mode and walk length trained over a
//! shared list of seeds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use grawd::data::{Dataset, Holdout, TrainingView};
use grawd::eval::{evaluate_report, EvalConfig};
use grawd::train::{train, DeviationMode, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arm {
    pub mode: DeviationMode,
    /// Walk length; ignored by arms without a walk term.
    pub steps: usize,
}

impl Arm {
    pub const fn new(mode: DeviationMode, steps: usize) -> Self {
        Arm { mode, steps }
    }

    /// Attraction at T = 0 and 3, the extra-class baseline, and deviation at
    /// T = 1, 3, 5 and 10.
    pub fn table() -> Vec<Arm> {
        use DeviationMode::*;
        vec![
            Arm::new(Grawt, 0),
            Arm::new(Grawt, 3),
            Arm::new(ExtraClass, 0),
            Arm::new(Grawd, 1),
            Arm::new(Grawd, 3),
            Arm::new(Grawd, 5),
            Arm::new(Grawd, 10),
        ]
    }

    pub fn name(&self) -> String {
        match self.mode {
            DeviationMode::Grawd | DeviationMode::Grawt => format!("{}_t{}", self.mode.as_str(), self.steps),
            m => m.as_str().to_string(),
        }
    }

    pub fn parse(s: &str) -> Result<Arm, String> {
        let bad = || format!("unknown arm {s:?} (grawt_t<T>, grawd_t<T>, extra_class, none)");
        match s {
            "extra_class" => return Ok(Arm::new(DeviationMode::ExtraClass, 0)),
            "none" => return Ok(Arm::new(DeviationMode::None, 0)),
            _ => {}
        }
        let (mode, t) = s.split_once("_t").ok_or_else(bad)?;
        let mode = match mode {
            "grawd" => DeviationMode::Grawd,
            "grawt" => DeviationMode::Grawt,
            _ => return Err(bad()),
        };
        Ok(Arm::new(mode, t.parse().map_err(|_| bad())?))
    }

    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.deviation_mode = self.mode;
        cfg.walk.steps = self.steps;
        cfg.seed = seed;
        cfg
    }
}

/// Outcome of one (arm, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub result: Result<(f64, f64), CliError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmMean {
    pub arm: Arm,
    pub completed: usize,
    pub top1: f64,
    pub auc: f64,
    pub auc_se: f64,
}

pub struct Ablation {
    pub runs: Vec<ArmRun>,
    pub means: Vec<ArmMean>,
}

fn run_one(
    ds: &Dataset,
    holdout: &Holdout,
    view: &TrainingView,
    base: &TrainConfig,
    eval: &EvalConfig,
    arm: Arm,
    seed: u64,
) -> Result<(f64, f64), CliError> {
    let out = train(view, &arm.config(base, seed))?;
    let report = evaluate_report(&out.model, ds, holdout, eval, seed)?;
    Ok((report.top1_unseen, report.auc))
}

/// Arms and seeds of a sweep.
pub struct Sweep<'a> {
    pub arms: &'a [Arm],
    pub first_seed: u64,
    pub seeds: usize,
    /// Worker threads; results keep arm-major order regardless.
    pub threads: usize,
}

/// Trains and evaluates every arm for seeds `first_seed..first_seed + seeds`.
pub fn ablate(
    ds: &Dataset,
    holdout: &Holdout,
    base: &TrainConfig,
    eval: &EvalConfig,
    sweep: &Sweep<'_>,
) -> Result<Ablation, CliError> {
    let view = TrainingView::new(ds, holdout)?;
    let (arms, first_seed, threads) = (sweep.arms, sweep.first_seed, sweep.threads);
    let jobs: Vec<(Arm, u64)> = arms
        .iter()
        .flat_map(|&a| (0..sweep.seeds as u64).map(move |s| (a, first_seed + s)))
        .collect();
    let slots: Vec<Mutex<Option<ArmRun>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(arm, seed)) = jobs.get(i) else { break };
                let result = run_one(ds, holdout, &view, base, eval, arm, seed);
                *slots[i].lock().unwrap() = Some(ArmRun { arm, seed, result });
            });
        }
    });
    let runs: Vec<ArmRun> = slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every job ran"))
        .collect();
    let means = arms
        .iter()
        .map(|&arm| {
            let ok: Vec<(f64, f64)> = runs
                .iter()
                .filter(|r| r.arm == arm)
                .filter_map(|r| r.result.clone().ok())
                .collect();
            let n = ok.len() as f64;
            let top1 = ok.iter().map(|r| r.0).sum::<f64>() / n;
            let auc = ok.iter().map(|r| r.1).sum::<f64>() / n;
            let auc_se = if ok.len() > 1 {
                (ok.iter().map(|r| (r.1 - auc).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                f64::NAN
            };
            ArmMean {
                arm,
                completed: ok.len(),
                top1,
                auc,
                auc_se,
            }
        })
        .collect();
    Ok(Ablation { runs, means })
}

impl Ablation {
    /// One row per (arm, seed) followed by one mean row per arm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,top1_unseen,su_auc,status\n");
        for r in &self.runs {
            match &r.result {
                Ok((top1, auc)) => out.push_str(&format!("{},{},{top1:.6},{auc:.6},ok\n", r.arm.name(), r.seed)),
                Err(e) => out.push_str(&format!(
                    "{},{},,,failed: {}\n",
                    r.arm.name(),
                    r.seed,
                    e.message.replace([',', '\n'], " ")
                )),
            }
        }
        for m in &self.means {
            if m.completed == 0 {
                out.push_str(&format!("{},mean,,,failed\n", m.arm.name()));
            } else {
                out.push_str(&format!("{},mean,{:.6},{:.6},ok ({} runs)\n", m.arm.name(), m.top1, m.auc, m.completed));
            }
        }
        out
    }

    /// Fixed-width per-arm mean table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:>6} {:>10} {:>10} {:>8}\n", "arm", "runs", "top1", "su_auc", "auc_se");
        for m in &self.means {
            out.push_str(&format!(
                "{:<14} {:>6} {:>10.4} {:>10.4} {:>8.4}\n",
                m.arm.name(),
                m.completed,
                m.top1,
                m.auc,
                m.auc_se
            ));
        }
        out
    }

    pub fn all_failed(&self) -> bool {
        self.runs.iter().all(|r| r.result.is_err())
    }
}
