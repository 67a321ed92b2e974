//! Command-line driver. [`run`] parses arguments, executes one command and
//! returns the process exit code.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod gradcheck;

use std::io::Write;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{RunConfig, FLAG_ALIASES, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new(EXIT_USAGE, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError::new(EXIT_IO, message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<grawd::Error> for CliError {
    fn from(e: grawd::Error) -> Self {
        use grawd::Error as E;
        let code = match &e {
            E::Io { .. } | E::Parse { .. } | E::Checkpoint(_) => EXIT_IO,
            E::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

const COMMANDS: &[(&str, &str)] = &[
    ("synth", "write a synthetic dataset bundle to <out>"),
    ("train", "train on the seen classes of <data>; writes <out>/checkpoint.json and <out>/train_log.csv"),
    ("eval", "evaluate a checkpoint on <data>; writes <out>/report.csv and <out>/curve.csv"),
    ("oracle", "write a class-mean reference checkpoint for <data> to <out>/checkpoint.json"),
    ("ablate", "train and evaluate every arm for each seed; writes <out>/ablation.csv"),
    ("gradcheck", "finite-difference check of every gradient used in training"),
    ("config", "print the effective configuration"),
];

fn long_name(key: &str) -> String {
    key.replace('_', "-")
}

fn command() -> Command {
    let defaults = RunConfig::default();
    let mut args = vec![Arg::new("config")
        .long("config")
        .short('c')
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help("key = value file applied before command-line flags")
        .help_heading("Paths")];
    for k in KEYS {
        let default = defaults.get(k.name).unwrap_or_default();
        let shown = if default.is_empty() { "\"\"".to_string() } else { default };
        let mut arg = Arg::new(k.name)
            .long(long_name(k.name))
            .value_name("VALUE")
            .action(ArgAction::Set)
            .allow_hyphen_values(true)
            .help(format!("{} [default: {shown}]", k.help))
            .help_heading(k.section);
        if k.name.contains('_') {
            arg = arg.alias(k.name);
        }
        for &(name, alias) in FLAG_ALIASES {
            if name == k.name {
                arg = arg.alias(alias);
            }
        }
        args.push(arg);
    }
    Command::new("grawd")
        .about("Generative zero-shot learning with a random-walk deviation loss")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .args_override_self(true)
        .arg_required_else_help(true)
        .subcommands(
            COMMANDS
                .iter()
                .map(|&(name, about)| Command::new(name).about(about).args(args.clone())),
        )
}

fn resolve(matches: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for k in KEYS {
        if let Some(v) = matches.get_one::<String>(k.name) {
            cfg.set(k.name, v).map_err(|e| CliError::usage(format!("--{}: {e}", long_name(k.name))))?;
        }
    }
    Ok(cfg)
}

/// Runs one command. `args` excludes the program name.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = std::iter::once("grawd".to_string())
        .chain(args.into_iter().map(Into::into))
        .collect();
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = resolve(sub).and_then(|cfg| commands::dispatch(name, &cfg, out));
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn help_lists_every_key_with_default() {
        let (code, out, _) = run_capture(&["train", "--help"]);
        assert_eq!(code, 0);
        for k in KEYS {
            assert!(out.contains(&format!("--{}", long_name(k.name))), "{}", k.name);
        }
        assert!(out.contains("[default: 0.0001]"));
        assert!(out.contains("[default: grawd]"));
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let (code, _, err) = run_capture(&["train", "--epohcs", "3"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("epohcs"));
        let (code, _, _) = run_capture(&["frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn flags_override_and_accept_aliases() {
        let mut out = Vec::new();
        let code = run(
            ["config", "--walk-T", "3", "--lr=0.5", "--diag-fill", "-1e6", "--n_u", "7"],
            &mut out,
            &mut Vec::new(),
        );
        assert_eq!(code, 0);
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("walk_t = 3\n"));
        assert!(text.contains("lr = 0.5\n"));
        assert!(text.contains("diag_fill = -1000000\n"));
        assert!(text.contains("n_u = 7\n"));
    }
}
