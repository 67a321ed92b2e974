use std::io::Write;
use std::path::Path;

use grawd::data::{load_bundle, save_bundle, synthesize, Dataset, Holdout, TrainingView};
use grawd::eval::{class_means, evaluate_report};
use grawd::model::Checkpoint;
use grawd::train::{log_text, train};

use crate::ablate::{ablate, Sweep};
use crate::config::RunConfig;
use crate::gradcheck::run_suite;
use crate::{CliError, CliResult, EXIT_GRADCHECK, EXIT_OK};

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(|e| CliError::io(format!("stdout: {e}")))?
    };
}

pub fn dispatch(name: &str, cfg: &RunConfig, out: &mut dyn Write) -> CliResult<i32> {
    match name {
        "synth" => cmd_synth(cfg, out),
        "train" => cmd_train(cfg, out),
        "eval" => cmd_eval(cfg, out),
        "oracle" => cmd_oracle(cfg, out),
        "ablate" => cmd_ablate(cfg, out),
        "gradcheck" => cmd_gradcheck(cfg, out),
        "config" => {
            out.write_all(cfg.to_text().as_bytes())
                .map_err(|e| CliError::io(format!("stdout: {e}")))?;
            Ok(EXIT_OK)
        }
        other => Err(CliError::usage(format!("unknown command {other:?}"))),
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn load(cfg: &RunConfig) -> CliResult<(Dataset, Holdout)> {
    let ds = load_bundle(&cfg.data)?;
    let holdout = Holdout::new(&ds, cfg.holdout, cfg.split_seed)?;
    Ok((ds, holdout))
}

fn summary(ds: &Dataset) -> String {
    format!(
        "{} classes ({} seen, {} unseen), {} rows, feature dim {}, descriptor dim {}",
        ds.num_classes(),
        ds.seen_classes().len(),
        ds.unseen_classes().len(),
        ds.num_rows(),
        ds.feature_dim(),
        ds.descriptor_dim()
    )
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<i32> {
    let ds = synthesize(&cfg.synth)?;
    save_bundle(&ds, &cfg.out)?;
    say!(out, "wrote bundle {}: {}", cfg.out.display(), summary(&ds));
    Ok(EXIT_OK)
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<i32> {
    let (ds, holdout) = load(cfg)?;
    let view = TrainingView::new(&ds, &holdout)?;
    say!(
        out,
        "training {} on {} rows of {} seen classes for {} epochs",
        cfg.train.deviation_mode.as_str(),
        view.len(),
        view.num_seen(),
        cfg.train.epochs
    );
    let result = train(&view, &cfg.train)?;
    let ckpt = cfg.out.join("checkpoint.json");
    let log = cfg.out.join("train_log.csv");
    write_file(&log, &log_text(&result.log))?;
    Checkpoint::Gan(result.model).save(&ckpt)?;
    match result.log.last() {
        Some(e) => say!(
            out,
            "epoch {}: loss_g {:.6} loss_d {:.6} deviation {:.6} visit {:.6} landing_entropy {:.6}",
            e.epoch,
            e.loss_g,
            e.loss_d,
            e.deviation,
            e.visit,
            e.landing_entropy
        ),
        None => say!(out, "no epochs run"),
    }
    say!(out, "wrote {} and {}", ckpt.display(), log.display());
    Ok(EXIT_OK)
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<i32> {
    let (ds, holdout) = load(cfg)?;
    let ckpt = Checkpoint::load(&cfg.checkpoint_path())?;
    let report = evaluate_report(&ckpt, &ds, &holdout, &cfg.eval, cfg.train.seed)?;
    let report_path = cfg.out.join("report.csv");
    let curve_path = cfg.out.join("curve.csv");
    write_file(&report_path, &report.to_text())?;
    write_file(&curve_path, &report.curve_csv())?;
    say!(out, "Top-1 (unseen) {:.4}", report.top1_unseen);
    say!(out, "SU-AUC {:.4}", report.auc);
    say!(
        out,
        "best H {:.4} at S {:.4}, U {:.4}",
        report.h_best,
        report.s_best,
        report.u_best
    );
    say!(out, "wrote {} and {}", report_path.display(), curve_path.display());
    Ok(EXIT_OK)
}

pub fn cmd_oracle(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<i32> {
    let ds = load_bundle(&cfg.data)?;
    let path = cfg.out.join("checkpoint.json");
    ensure_parent(&path)?;
    Checkpoint::ClassMeans { means: class_means(&ds)? }.save(&path)?;
    say!(out, "wrote class-mean checkpoint {} ({} classes)", path.display(), ds.num_classes());
    Ok(EXIT_OK)
}

pub fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<i32> {
    if cfg.arms.is_empty() || cfg.seeds == 0 {
        return Err(CliError::usage("ablate needs at least one arm and one seed"));
    }
    let (ds, holdout) = load(cfg)?;
    let sweep = Sweep {
        arms: &cfg.arms,
        first_seed: cfg.train.seed,
        seeds: cfg.seeds,
        threads: cfg.threads,
    };
    let result = ablate(&ds, &holdout, &cfg.train, &cfg.eval, &sweep)?;
    let path = cfg.out.join("ablation.csv");
    write_file(&path, &result.to_csv())?;
    for r in &result.runs {
        if let Err(e) = &r.result {
            say!(out, "arm {} seed {} failed: {e}", r.arm.name(), r.seed);
        }
    }
    write!(out, "{}", result.table()).map_err(|e| CliError::io(format!("stdout: {e}")))?;
    say!(out, "wrote {}", path.display());
    if result.all_failed() {
        let first = result.runs.iter().find_map(|r| r.result.clone().err());
        return Err(first.unwrap_or_else(|| CliError::usage("every arm failed")));
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<i32> {
    let report = run_suite(cfg.train.seed, cfg.inject_fault)?;
    write!(out, "{}", report.to_text()).map_err(|e| CliError::io(format!("stdout: {e}")))?;
    if report.passed() {
        say!(out, "all {} checks passed", report.checks.len());
        Ok(EXIT_OK)
    } else {
        say!(out, "{} of {} checks failed", report.failures(), report.checks.len());
        Ok(EXIT_GRADCHECK)
    }
}
