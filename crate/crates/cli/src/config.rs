//! Plain `key = value` run configuration shared by every command.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use grawd::data::SyntheticSpec;
use grawd::eval::{EvalConfig, EvalSpace};
use grawd::train::{CenterMode, DeviationMode, TrainConfig};

use crate::ablate::Arm;
use crate::CliError;

/// A recognized configuration key.
pub struct Key {
    pub name: &'static str,
    pub section: &'static str,
    pub help: &'static str,
}

const fn key(section: &'static str, name: &'static str, help: &'static str) -> Key {
    Key { name, section, help }
}

pub const KEYS: &[Key] = &[
    key("Paths", "data", "bundle directory read by train, eval, oracle and ablate"),
    key("Paths", "out", "output directory"),
    key("Paths", "checkpoint", "checkpoint read by eval; empty means <out>/checkpoint.json"),
    key("Seeds", "seed", "seed for synthesis, training and evaluation pools"),
    key("Seeds", "split_seed", "seed of the seen-class train/test holdout"),
    key("Synthetic data", "num_seen", "seen classes"),
    key("Synthetic data", "num_unseen", "unseen classes"),
    key("Synthetic data", "feature_dim", "feature dimension"),
    key("Synthetic data", "descriptor_dim", "descriptor dimension"),
    key("Synthetic data", "samples_per_class", "rows per class"),
    key("Synthetic data", "noise_scale", "per-coordinate noise around each class mean"),
    key("Data", "holdout", "fraction of each seen class held out for testing"),
    key("Training", "deviation", "grawd | grawt | extra_class | none"),
    key("Training", "walk_t", "walk length T"),
    key("Training", "gamma", "per-step decay of the landing terms"),
    key("Training", "diag_fill", "similarity placed on the generation-graph diagonal"),
    key("Training", "lambda", "weight of the deviation term"),
    key("Training", "center_mode", "z_zero | episodic"),
    key("Training", "memory_size", "episodic memory rows per class"),
    key("Training", "epochs", "training epochs"),
    key("Training", "batch_size", "real rows per critic step"),
    key("Training", "n_u", "hallucinated generations per step, or auto for batch_size"),
    key("Training", "n_critic", "critic steps per generator step"),
    key("Training", "lr", "Adam learning rate"),
    key("Training", "beta1", "Adam first-moment decay"),
    key("Training", "beta2", "Adam second-moment decay"),
    key("Training", "gp_weight", "gradient-penalty weight"),
    key("Training", "critic_class_weight", "weight of each critic classification term"),
    key("Training", "generator_class_weight", "weight of the generator classification term"),
    key("Training", "alpha_low", "lower bound of the hallucination mixing weight"),
    key("Training", "alpha_high", "upper bound of the hallucination mixing weight"),
    key("Training", "noise_dim", "generator noise dimension"),
    key("Training", "generator_hidden", "comma-separated generator hidden widths"),
    key("Training", "critic_hidden", "critic trunk width"),
    key("Training", "beta", "norm of the normalized critic features"),
    key("Evaluation", "gen_per_class", "generated features per class"),
    key("Evaluation", "num_offsets", "calibration offsets when offsets = auto"),
    key("Evaluation", "offsets", "comma-separated increasing offsets, or auto"),
    key("Evaluation", "eval_space", "phi | feature"),
    key("Ablation", "seeds", "training seeds per arm, counting up from seed"),
    key("Ablation", "arms", "comma-separated arms: grawt_t<T>, grawd_t<T>, extra_class, none"),
    key("Ablation", "threads", "worker threads for independent arm runs"),
    key("Gradient check", "inject_fault", "none | softmax_sign (needs the fault-injection feature)"),
];

/// Extra spellings accepted on the command line.
pub const FLAG_ALIASES: &[(&str, &str)] = &[("walk_t", "walk-T")];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    SoftmaxSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub split_seed: u64,
    pub synth: SyntheticSpec,
    pub holdout: f64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: usize,
    pub arms: Vec<Arm>,
    pub threads: usize,
    pub inject_fault: Fault,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("bundle"),
            out: PathBuf::from("out"),
            checkpoint: None,
            split_seed: 0,
            synth: SyntheticSpec::default(),
            holdout: 0.2,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: 5,
            arms: Arm::table(),
            threads: 1,
            inject_fault: Fault::None,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Current value of `name`, formatted as it would be written in a file.
    pub fn get(&self, name: &str) -> Option<String> {
        let t = &self.train;
        let s = &self.synth;
        let v = match name {
            "data" => self.data.display().to_string(),
            "out" => self.out.display().to_string(),
            "checkpoint" => self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "seed" => t.seed.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "num_seen" => s.num_seen.to_string(),
            "num_unseen" => s.num_unseen.to_string(),
            "feature_dim" => s.feature_dim.to_string(),
            "descriptor_dim" => s.descriptor_dim.to_string(),
            "samples_per_class" => s.samples_per_class.to_string(),
            "noise_scale" => s.noise_scale.to_string(),
            "holdout" => self.holdout.to_string(),
            "deviation" => t.deviation_mode.as_str().to_string(),
            "walk_t" => t.walk.steps.to_string(),
            "gamma" => t.walk.gamma.to_string(),
            "diag_fill" => t.walk.diag_fill.to_string(),
            "lambda" => t.lambda.to_string(),
            "center_mode" => t.center_mode.as_str().to_string(),
            "memory_size" => t.memory_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "n_u" => t.n_u.map_or_else(|| "auto".to_string(), |n| n.to_string()),
            "n_critic" => t.n_critic.to_string(),
            "lr" => t.lr.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "gp_weight" => t.gp_weight.to_string(),
            "critic_class_weight" => t.critic_class_weight.to_string(),
            "generator_class_weight" => t.generator_class_weight.to_string(),
            "alpha_low" => t.alpha_low.to_string(),
            "alpha_high" => t.alpha_high.to_string(),
            "noise_dim" => t.noise_dim.to_string(),
            "generator_hidden" => join(&t.generator_hidden),
            "critic_hidden" => t.critic_hidden.to_string(),
            "beta" => t.beta.to_string(),
            "gen_per_class" => self.eval.gen_per_class.to_string(),
            "num_offsets" => self.eval.num_offsets.to_string(),
            "offsets" => self.eval.offsets.as_deref().map_or_else(|| "auto".to_string(), join),
            "eval_space" => match self.eval.space {
                EvalSpace::Phi => "phi",
                EvalSpace::Feature => "feature",
            }
            .to_string(),
            "seeds" => self.seeds.to_string(),
            "arms" => self.arms.iter().map(|a| a.name()).collect::<Vec<_>>().join(","),
            "threads" => self.threads.to_string(),
            "inject_fault" => match self.inject_fault {
                Fault::None => "none",
                Fault::SoftmaxSign => "softmax_sign",
            }
            .to_string(),
            _ => return None,
        };
        Some(v)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let t = &mut self.train;
        let s = &mut self.synth;
        let k = name;
        match name {
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            "seed" => {
                t.seed = num(k, value)?;
                s.seed = t.seed;
            }
            "split_seed" => self.split_seed = num(k, value)?,
            "num_seen" => s.num_seen = num(k, value)?,
            "num_unseen" => s.num_unseen = num(k, value)?,
            "feature_dim" => s.feature_dim = num(k, value)?,
            "descriptor_dim" => s.descriptor_dim = num(k, value)?,
            "samples_per_class" => s.samples_per_class = num(k, value)?,
            "noise_scale" => s.noise_scale = num(k, value)?,
            "holdout" => self.holdout = num(k, value)?,
            "deviation" => t.deviation_mode = DeviationMode::parse(value).map_err(|e| e.to_string())?,
            "walk_t" => t.walk.steps = num(k, value)?,
            "gamma" => t.walk.gamma = num(k, value)?,
            "diag_fill" => t.walk.diag_fill = num(k, value)?,
            "lambda" => t.lambda = num(k, value)?,
            "center_mode" => t.center_mode = CenterMode::parse(value).map_err(|e| e.to_string())?,
            "memory_size" => t.memory_size = num(k, value)?,
            "epochs" => t.epochs = num(k, value)?,
            "batch_size" => t.batch_size = num(k, value)?,
            "n_u" => t.n_u = if value == "auto" { None } else { Some(num(k, value)?) },
            "n_critic" => t.n_critic = num(k, value)?,
            "lr" => t.lr = num(k, value)?,
            "beta1" => t.beta1 = num(k, value)?,
            "beta2" => t.beta2 = num(k, value)?,
            "gp_weight" => t.gp_weight = num(k, value)?,
            "critic_class_weight" => t.critic_class_weight = num(k, value)?,
            "generator_class_weight" => t.generator_class_weight = num(k, value)?,
            "alpha_low" => t.alpha_low = num(k, value)?,
            "alpha_high" => t.alpha_high = num(k, value)?,
            "noise_dim" => t.noise_dim = num(k, value)?,
            "generator_hidden" => t.generator_hidden = list(k, value)?,
            "critic_hidden" => t.critic_hidden = num(k, value)?,
            "beta" => t.beta = num(k, value)?,
            "gen_per_class" => self.eval.gen_per_class = num(k, value)?,
            "num_offsets" => self.eval.num_offsets = num(k, value)?,
            "offsets" => self.eval.offsets = if value == "auto" { None } else { Some(list(k, value)?) },
            "eval_space" => {
                self.eval.space = match value {
                    "phi" => EvalSpace::Phi,
                    "feature" => EvalSpace::Feature,
                    _ => return Err(format!("eval_space: expected phi or feature, got {value:?}")),
                }
            }
            "seeds" => self.seeds = num(k, value)?,
            "arms" => {
                self.arms = value
                    .split(',')
                    .map(str::trim)
                    .filter(|a| !a.is_empty())
                    .map(Arm::parse)
                    .collect::<Result<_, _>>()?
            }
            "threads" => self.threads = num(k, value)?,
            "inject_fault" => {
                self.inject_fault = match value {
                    "none" => Fault::None,
                    "softmax_sign" => Fault::SoftmaxSign,
                    _ => return Err(format!("inject_fault: expected none or softmax_sign, got {value:?}")),
                }
            }
            _ => return Err(format!("unknown config key {name:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are
    /// skipped; unknown and repeated keys are errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| format!("{origin}:{}: {msg}", i + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if find_key(k).is_none() {
                return Err(at(format!("unknown config key {k:?}")));
            }
            if seen.contains(&k) {
                return Err(at(format!("key {k:?} given twice")));
            }
            seen.push(k);
            self.set(k, v).map_err(at)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string()).map_err(CliError::usage)
    }

    /// Every key with its current value, in registry order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for k in KEYS {
            if k.section != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("# {}\n", k.section));
                section = k.section;
            }
            out.push_str(&format!("{} = {}\n", k.name, self.get(k.name).unwrap_or_default()));
        }
        out
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.json"))
    }
}
