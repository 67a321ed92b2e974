//! Adversarial training with the walk loss on hallucinated classes.
//!
//! An epoch is one pass of the critic over the shuffled training rows in
//! minibatches, rounded up to a whole number of `n_critic` groups; a
//! generator step follows every group.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::TrainingView;
use crate::error::{Error, Result};
use crate::grad::{Adam, Matrix, Tape, Var};
use crate::model::{class_centers, episodic_centers, BoundDiscriminator, BoundGenerator, EpisodicMemory, Model, ModelConfig};
use crate::rng::{stream, Rng};
use crate::walk::{build_similarities, make_transitions, walk_loss, TargetMode, TransitionBundle, WalkConfig, WalkLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviationMode {
    /// Walk loss with uniform landing target.
    Grawd,
    /// Walk loss with the start class as landing target.
    Grawt,
    /// Hallucinated generations classified as an extra class instead.
    ExtraClass,
    None,
}

impl DeviationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grawd" => Ok(DeviationMode::Grawd),
            "grawt" => Ok(DeviationMode::Grawt),
            "extra_class" => Ok(DeviationMode::ExtraClass),
            "none" => Ok(DeviationMode::None),
            other => Err(Error::Config(format!(
                "unknown deviation mode {other:?} (grawd, grawt, extra_class, none)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DeviationMode::Grawd => "grawd",
            DeviationMode::Grawt => "grawt",
            DeviationMode::ExtraClass => "extra_class",
            DeviationMode::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CenterMode {
    /// `phi(G(0, s_i))`.
    ZZero,
    /// Mean `phi` of a frozen per-class sample of real rows.
    Episodic,
}

impl CenterMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "z_zero" => Ok(CenterMode::ZZero),
            "episodic" => Ok(CenterMode::Episodic),
            other => Err(Error::Config(format!("unknown center mode {other:?} (z_zero, episodic)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CenterMode::ZZero => "z_zero",
            CenterMode::Episodic => "episodic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the deviation term (walk loss or extra-class loss).
    pub lambda: f64,
    /// Walk settings; the landing target follows `deviation_mode`.
    pub walk: WalkConfig,
    pub n_critic: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Hallucinated generations per step; defaults to `batch_size`.
    pub n_u: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub deviation_mode: DeviationMode,
    pub center_mode: CenterMode,
    /// Weight of the gradient penalty.
    pub gp_weight: f64,
    /// Weight of each critic classification term.
    pub critic_class_weight: f64,
    /// Weight of the generator's seen-class classification term.
    pub generator_class_weight: f64,
    pub memory_size: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub noise_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: usize,
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            walk: WalkConfig::default(),
            n_critic: 5,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            batch_size: 64,
            n_u: None,
            epochs: 50,
            seed: 0,
            deviation_mode: DeviationMode::Grawd,
            center_mode: CenterMode::ZZero,
            gp_weight: 10.0,
            critic_class_weight: 0.5,
            generator_class_weight: 1.0,
            memory_size: 10,
            alpha_low: 0.2,
            alpha_high: 0.8,
            noise_dim: 128,
            generator_hidden: vec![256, 256],
            critic_hidden: 256,
            beta: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn n_u(&self) -> usize {
        self.n_u.unwrap_or(self.batch_size)
    }

    /// Walk settings with the target implied by the deviation mode.
    pub fn effective_walk(&self) -> WalkConfig {
        WalkConfig {
            target: match self.deviation_mode {
                DeviationMode::Grawt => TargetMode::Identity,
                _ => TargetMode::Uniform,
            },
            ..self.walk.clone()
        }
    }

    pub fn model_config(&self, descriptor_dim: usize, feature_dim: usize, num_seen: usize) -> ModelConfig {
        ModelConfig {
            noise_dim: self.noise_dim,
            generator_hidden: self.generator_hidden.clone(),
            critic_hidden: self.critic_hidden,
            extra_class: self.deviation_mode == DeviationMode::ExtraClass,
            beta: self.beta,
            ..ModelConfig::new(descriptor_dim, feature_dim, num_seen)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.n_critic == 0 {
            return bad("n_critic must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.n_u() < 2 {
            return bad(format!("n_u must be at least 2, got {}", self.n_u()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        for (name, w) in [
            ("gp_weight", self.gp_weight),
            ("critic_class_weight", self.critic_class_weight),
            ("generator_class_weight", self.generator_class_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {w}"));
            }
        }
        if !(0.0 <= self.alpha_low && self.alpha_low < self.alpha_high && self.alpha_high <= 1.0) {
            return bad(format!(
                "alpha bounds must satisfy 0 <= low < high <= 1, got [{}, {}]",
                self.alpha_low, self.alpha_high
            ));
        }
        if self.memory_size == 0 {
            return bad("memory_size must be at least 1".into());
        }
        self.walk.validate()?;
        self.model_config(2, 2, 2).validate()
    }
}

/// Convex combinations of two distinct seen descriptors.
#[derive(Debug, Clone)]
pub struct HallucinationSampler {
    descriptors: Matrix,
    alpha: Uniform<f64>,
    rng: Rng,
}

/// One hallucinated descriptor with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Hallucination {
    pub descriptor: Vec<f64>,
    pub a: usize,
    pub b: usize,
    pub alpha: f64,
}

impl HallucinationSampler {
    pub fn new(descriptors: Matrix, low: f64, high: f64, rng: Rng) -> Result<Self> {
        if descriptors.rows() < 2 {
            return Err(Error::Config(format!(
                "hallucination needs at least 2 seen classes, got {}",
                descriptors.rows()
            )));
        }
        let alpha = Uniform::new_inclusive(low, high)
            .map_err(|e| Error::Config(format!("alpha bounds [{low}, {high}]: {e}")))?;
        Ok(HallucinationSampler { descriptors, alpha, rng })
    }

    pub fn sample(&mut self) -> Hallucination {
        let k = self.descriptors.rows();
        let picked = rand::seq::index::sample(&mut self.rng, k, 2);
        let (a, b) = (picked.index(0), picked.index(1));
        let alpha = self.alpha.sample(&mut self.rng);
        Hallucination {
            descriptor: mix(self.descriptors.row(a), self.descriptors.row(b), alpha),
            a,
            b,
            alpha,
        }
    }

    /// `n` hallucinated descriptors as rows.
    pub fn sample_batch(&mut self, n: usize) -> Matrix {
        let k = self.descriptors.cols();
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            data.extend(self.sample().descriptor);
        }
        Matrix::from_fn(n, k, |i, j| data[i * k + j])
    }
}

/// `alpha * a + (1 - alpha) * b`.
pub fn mix(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect()
}

/// Every random input of one step, drawn up front so loss evaluation is a
/// pure function of model and batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Real features, n x d.
    pub real: Matrix,
    /// Seen-local labels of `real`.
    pub labels: Vec<usize>,
    /// Noise for the seen-class generations, n x Z.
    pub noise_seen: Matrix,
    /// Hallucinated descriptors, N_u x k.
    pub hallucinated: Matrix,
    /// Noise for the hallucinated generations, N_u x Z.
    pub noise_unseen: Matrix,
    /// Interpolation weight per row for the gradient penalty, n x 1.
    pub mix: Matrix,
}

impl Batch {
    pub fn sample(
        view: &TrainingView,
        rows: &[usize],
        n_u: usize,
        noise_dim: usize,
        sampler: &mut HallucinationSampler,
        rng: &mut Rng,
    ) -> Result<Batch> {
        let unit = Uniform::new(0.0, 1.0).expect("valid bounds");
        let n = rows.len();
        Ok(Batch {
            real: view.features().select_rows(rows)?,
            labels: rows.iter().map(|&r| view.labels()[r]).collect(),
            noise_seen: Matrix::from_fn(n, noise_dim, |_, _| StandardNormal.sample(rng)),
            hallucinated: sampler.sample_batch(n_u),
            noise_unseen: Matrix::from_fn(n_u, noise_dim, |_, _| StandardNormal.sample(rng)),
            mix: Matrix::from_fn(n, 1, |_, _| unit.sample(rng)),
        })
    }

    /// Descriptor row for each label.
    pub fn seen_descriptors(&self, seen: &Matrix) -> Result<Matrix> {
        seen.select_rows(&self.labels)
    }
}

/// Row-wise `mix * real + (1 - mix) * fake`.
pub fn interpolate(real: &Matrix, fake: &Matrix, mix: &Matrix) -> Result<Matrix> {
    if real.shape() != fake.shape() {
        return Err(Error::dim("interpolate", real.shape(), fake.shape()));
    }
    if mix.rows() != real.rows() || mix.cols() != 1 {
        return Err(Error::dim("interpolate", mix.shape(), crate::error::Shape(real.rows(), 1)));
    }
    Ok(Matrix::from_fn(real.rows(), real.cols(), |i, j| {
        let t = mix.get(i, 0);
        t * real.get(i, j) + (1.0 - t) * fake.get(i, j)
    }))
}

/// Added under the square root so the norm stays differentiable at a zero
/// gradient.
pub const NORM_EPS: f64 = 1e-24;

/// `mean_rows (||grad_x score(x)|| - 1)^2` at the rows of `x`, differentiable
/// with respect to whatever `score` depends on.
pub fn gradient_penalty<'t>(x: Var<'t>, score: impl Fn(Var<'t>) -> Result<Var<'t>>) -> Result<Var<'t>> {
    let tape = x.tape();
    let s = score(x)?;
    let grad = tape.gradients(s.sum()?, &[x])?[0];
    let norm = grad.square()?.row_sum()?.add_scalar(NORM_EPS)?.sqrt()?;
    norm.add_scalar(-1.0)?.square()?.mean()
}

/// Penalty of `critic` on random interpolates of `real` and `fake`.
pub fn gradient_penalty_between<'t>(
    tape: &'t Tape,
    real: &Matrix,
    fake: &Matrix,
    mix: &Matrix,
    critic: &BoundDiscriminator<'t>,
) -> Result<Var<'t>> {
    let x = tape.var(interpolate(real, fake, mix)?);
    gradient_penalty(x, |v| critic.real_score(v))
}

/// Mean negative log-likelihood of `labels` under row-softmaxed `logits`.
pub fn class_nll<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let crate::error::Shape(n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::dim("class_nll", logits.shape(), crate::error::Shape(labels.len(), k)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract {
            op: "class_nll",
            detail: format!("label {bad} out of range for {k} logits"),
        });
    }
    let onehot = Matrix::from_fn(n, k, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
    logits
        .row_log_softmax()?
        .mul_const(Rc::new(onehot))?
        .sum()?
        .scale(-1.0 / n as f64)
}

/// Cross-entropy of `fake_unseen` generations against the extra class.
pub fn extra_class_loss<'t>(critic: &BoundDiscriminator<'t>, fake_unseen: Var<'t>, num_seen: usize) -> Result<Var<'t>> {
    let logits = critic.discriminate(fake_unseen)?.class_logits;
    if logits.shape().1 != num_seen + 1 {
        return Err(Error::Config(format!(
            "extra-class loss needs {} logits, class head has {}",
            num_seen + 1,
            logits.shape().1
        )));
    }
    class_nll(logits, &vec![num_seen; fake_unseen.shape().0])
}

/// Separately readable terms of the critic objective.
#[derive(Debug, Clone, Copy)]
pub struct CriticLoss<'t> {
    pub fake_unseen: Var<'t>,
    pub fake_seen: Var<'t>,
    pub real: Var<'t>,
    pub penalty: Var<'t>,
    pub class_real: Var<'t>,
    pub class_fake: Var<'t>,
    pub extra: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// `E[D(fake_u)] + E[D(fake_s)] - E[D(real)] + w_gp L_Lip + w_c (NLL_real +
/// NLL_fake [+ NLL_extra])`.
pub fn critic_loss<'t>(
    tape: &'t Tape,
    generator: &BoundGenerator<'t>,
    critic: &BoundDiscriminator<'t>,
    seen_descriptors: &Matrix,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<CriticLoss<'t>> {
    if batch.labels.is_empty() {
        return Err(Error::Config("empty critic batch".into()));
    }
    let s = tape.constant(batch.seen_descriptors(seen_descriptors)?);
    let fake_s = generator.generate(s, tape.constant(batch.noise_seen.clone()))?;
    let fake_u = generator.generate(
        tape.constant(batch.hallucinated.clone()),
        tape.constant(batch.noise_unseen.clone()),
    )?;
    let real_out = critic.discriminate(tape.constant(batch.real.clone()))?;
    let fake_s_out = critic.discriminate(fake_s)?;
    let fake_u_out = critic.discriminate(fake_u)?;

    let fake_unseen = fake_u_out.real_score.mean()?;
    let fake_seen = fake_s_out.real_score.mean()?;
    let real = real_out.real_score.mean()?;
    let penalty = gradient_penalty_between(tape, &batch.real, &fake_s.value(), &batch.mix, critic)?;
    let class_real = class_nll(real_out.class_logits, &batch.labels)?;
    let class_fake = class_nll(fake_s_out.class_logits, &batch.labels)?;
    let extra = if cfg.deviation_mode == DeviationMode::ExtraClass {
        let k = seen_descriptors.rows();
        Some(class_nll(fake_u_out.class_logits, &vec![k; batch.hallucinated.rows()])?)
    } else {
        None
    };

    let mut class_terms = class_real.add(class_fake)?;
    if let Some(e) = extra {
        class_terms = class_terms.add(e)?;
    }
    let total = fake_unseen
        .add(fake_seen)?
        .sub(real)?
        .add(penalty.scale(cfg.gp_weight)?)?
        .add(class_terms.scale(cfg.critic_class_weight)?)?;
    Ok(CriticLoss {
        fake_unseen,
        fake_seen,
        real,
        penalty,
        class_real,
        class_fake,
        extra,
        total,
    })
}

/// Separately readable terms of the generator objective.
pub struct GeneratorLoss<'t> {
    /// Walk loss over hallucinated generations, computed in every mode.
    pub walk: WalkLoss<'t>,
    pub bundle: TransitionBundle<'t>,
    /// `-E[D(G(s_u, z))]`.
    pub adv_unseen: Var<'t>,
    /// `-E[D(G(s_k, z))]`.
    pub adv_seen: Var<'t>,
    /// Class NLL of seen generations.
    pub class_seen: Var<'t>,
    /// Extra-class cross-entropy, in that mode only.
    pub extra: Option<Var<'t>>,
    /// Deviation contribution to `total`: `lambda` times the walk or
    /// extra-class loss, absent in the `none` mode.
    pub deviation_term: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// Inputs the generator objective needs beyond the batch.
pub struct GeneratorContext<'a> {
    pub seen_descriptors: &'a Matrix,
    pub memory: Option<&'a EpisodicMemory>,
}

pub fn generator_loss<'t>(
    tape: &'t Tape,
    generator: &BoundGenerator<'t>,
    critic: &BoundDiscriminator<'t>,
    ctx: &GeneratorContext<'_>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<GeneratorLoss<'t>> {
    let s = tape.constant(batch.seen_descriptors(ctx.seen_descriptors)?);
    let fake_s = generator.generate(s, tape.constant(batch.noise_seen.clone()))?;
    let fake_u = generator.generate(
        tape.constant(batch.hallucinated.clone()),
        tape.constant(batch.noise_unseen.clone()),
    )?;
    let fake_s_out = critic.discriminate(fake_s)?;
    let fake_u_out = critic.discriminate(fake_u)?;

    let x_u = crate::grad::scaled_l2_normalize(fake_u_out.trunk, cfg.beta)?;
    let centers = match cfg.center_mode {
        CenterMode::ZZero => class_centers(generator, critic, tape.constant(ctx.seen_descriptors.clone()), cfg.beta)?,
        CenterMode::Episodic => {
            let memory = ctx
                .memory
                .ok_or_else(|| Error::Config("episodic centers need an episodic memory".into()))?;
            episodic_centers(critic, memory, tape, cfg.beta)?
        }
    };
    let walk_cfg = cfg.effective_walk();
    let (a, b) = build_similarities(x_u, centers, &walk_cfg)?;
    let bundle = make_transitions(a, b)?;
    let walk = walk_loss(&bundle, &walk_cfg)?;

    let adv_unseen = fake_u_out.real_score.mean()?.neg()?;
    let adv_seen = fake_s_out.real_score.mean()?.neg()?;
    let class_seen = class_nll(fake_s_out.class_logits, &batch.labels)?;
    let extra = if cfg.deviation_mode == DeviationMode::ExtraClass {
        Some(extra_class_loss(critic, fake_u, ctx.seen_descriptors.rows())?)
    } else {
        None
    };
    let deviation_term = match cfg.deviation_mode {
        DeviationMode::Grawd | DeviationMode::Grawt => Some(walk.total.scale(cfg.lambda)?),
        DeviationMode::ExtraClass => Some(extra.expect("set in this mode").scale(cfg.lambda)?),
        DeviationMode::None => None,
    };
    let rest = adv_unseen
        .add(adv_seen)?
        .add(class_seen.scale(cfg.generator_class_weight)?)?;
    let total = match deviation_term {
        Some(d) => d.add(rest)?,
        None => rest,
    };
    Ok(GeneratorLoss {
        walk,
        bundle,
        adv_unseen,
        adv_seen,
        class_seen,
        extra,
        deviation_term,
        total,
    })
}

/// Plain values from one critic step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStep {
    pub loss: f64,
    /// `E[D(real)] - E[D(fake_s)]` before the update.
    pub wasserstein: f64,
    pub penalty: f64,
}

/// Plain values from one generator step.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorStep {
    pub loss: f64,
    pub deviation: f64,
    pub visit: f64,
    pub landing_entropy: f64,
}

/// One critic update; the generator is read but not changed.
pub fn discriminator_step(
    model: &mut Model,
    opt: &mut Adam,
    seen_descriptors: &Matrix,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<CriticStep> {
    let tape = Tape::new();
    let g = model.generator.bind(&tape, false);
    let d = model.discriminator.bind(&tape, true);
    let loss = critic_loss(&tape, &g, &d, seen_descriptors, batch, cfg)?;
    let out = CriticStep {
        loss: loss.total.item(),
        wasserstein: loss.real.item() - loss.fake_seen.item(),
        penalty: loss.penalty.item(),
    };
    let grads = tape.backward(loss.total)?;
    model.discriminator.store_grads(&d, &grads)?;
    opt.step(model.discriminator.parameters_mut())?;
    Ok(out)
}

/// Walk quantities handed to an observer after each generator step.
pub type Observer<'o> = dyn FnMut(usize, &TransitionBundle<'_>, &WalkLoss<'_>) + 'o;

/// One generator update; the critic is read but not changed.
pub fn generator_step(
    model: &mut Model,
    opt: &mut Adam,
    ctx: &GeneratorContext<'_>,
    batch: &Batch,
    cfg: &TrainConfig,
    epoch: usize,
    observer: Option<&mut Observer<'_>>,
) -> Result<GeneratorStep> {
    let tape = Tape::new();
    let g = model.generator.bind(&tape, true);
    let d = model.discriminator.bind(&tape, false);
    let loss = generator_loss(&tape, &g, &d, ctx, batch, cfg)?;
    if let Some(obs) = observer {
        obs(epoch, &loss.bundle, &loss.walk);
    }
    let report = loss.walk.report();
    let out = GeneratorStep {
        loss: loss.total.item(),
        deviation: report.deviation,
        visit: report.visit,
        landing_entropy: report.mean_landing_entropy(),
    };
    let grads = tape.backward(loss.total)?;
    model.generator.store_grads(&g, &grads)?;
    opt.step(model.generator.parameters_mut())?;
    Ok(out)
}

/// Per-epoch means over steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub deviation: f64,
    pub visit: f64,
    pub landing_entropy: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_g,loss_d,deviation,visit,landing_entropy";

impl EpochLog {
    /// Comma-separated row in [`LOG_HEADER`] order, shortest round-trip
    /// float formatting.
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss_g, self.loss_d, self.deviation, self.visit, self.landing_entropy
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.loss_g, self.loss_d, self.deviation, self.visit, self.landing_entropy]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn log_text(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out
}

pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Model, optimizers and random streams of one run.
pub struct Trainer<'v> {
    pub cfg: TrainConfig,
    pub model: Model,
    view: &'v TrainingView,
    opt_g: Adam,
    opt_d: Adam,
    sampler: HallucinationSampler,
    memory: Option<EpisodicMemory>,
    batch_rng: Rng,
    noise_rng: Rng,
}

impl<'v> Trainer<'v> {
    pub fn new(view: &'v TrainingView, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if view.is_empty() {
            return Err(Error::Dataset("no training rows".into()));
        }
        let model_cfg = cfg.model_config(
            view.seen_descriptors().cols(),
            view.features().cols(),
            view.num_seen(),
        );
        let model = Model::new(model_cfg, &mut stream(cfg.seed, 1))?;
        let sampler = HallucinationSampler::new(
            view.seen_descriptors().clone(),
            cfg.alpha_low,
            cfg.alpha_high,
            stream(cfg.seed, 3),
        )?;
        let memory = match cfg.center_mode {
            CenterMode::Episodic => Some(EpisodicMemory::sample(
                view.features(),
                view.labels(),
                view.num_seen(),
                cfg.memory_size,
                &mut stream(cfg.seed, 5),
            )?),
            CenterMode::ZZero => None,
        };
        Ok(Trainer {
            opt_g: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            batch_rng: stream(cfg.seed, 2),
            noise_rng: stream(cfg.seed, 4),
            cfg,
            model,
            view,
            sampler,
            memory,
        })
    }

    pub fn sample_batch(&mut self, rows: &[usize]) -> Result<Batch> {
        Batch::sample(
            self.view,
            rows,
            self.cfg.n_u(),
            self.cfg.noise_dim,
            &mut self.sampler,
            &mut self.noise_rng,
        )
    }

    pub fn critic_step(&mut self, batch: &Batch) -> Result<CriticStep> {
        discriminator_step(&mut self.model, &mut self.opt_d, self.view.seen_descriptors(), batch, &self.cfg)
    }

    pub fn generator_step(
        &mut self,
        batch: &Batch,
        epoch: usize,
        observer: Option<&mut Observer<'_>>,
    ) -> Result<GeneratorStep> {
        let ctx = GeneratorContext {
            seen_descriptors: self.view.seen_descriptors(),
            memory: self.memory.as_ref(),
        };
        generator_step(&mut self.model, &mut self.opt_g, &ctx, batch, &self.cfg, epoch, observer)
    }

    /// Runs epoch `epoch` (1-based) and returns its log record.
    pub fn run_epoch(&mut self, epoch: usize, mut observer: Option<&mut Observer<'_>>) -> Result<EpochLog> {
        let n = self.view.len();
        let bs = self.cfg.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.batch_rng);
        let batches: Vec<&[usize]> = order.chunks(bs).collect();
        let nc = self.cfg.n_critic;
        let steps = batches.len().div_ceil(nc) * nc;

        let (mut d_sum, mut g_sum, mut dev_sum, mut vis_sum, mut ent_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut g_steps = 0usize;
        for i in 0..steps {
            let batch = self.sample_batch(batches[i % batches.len()])?;
            let d = self.critic_step(&batch).map_err(|e| annotate(e, epoch, "critic", i))?;
            d_sum += d.loss;
            if (i + 1) % nc == 0 {
                let g = self
                    .generator_step(&batch, epoch, observer.as_deref_mut())
                    .map_err(|e| annotate(e, epoch, "generator", i / nc))?;
                g_sum += g.loss;
                dev_sum += g.deviation;
                vis_sum += g.visit;
                ent_sum += g.landing_entropy;
                g_steps += 1;
            }
        }
        let gs = g_steps as f64;
        let log = EpochLog {
            epoch,
            loss_g: g_sum / gs,
            loss_d: d_sum / steps as f64,
            deviation: dev_sum / gs,
            visit: vis_sum / gs,
            landing_entropy: ent_sum / gs,
        };
        if !log.is_finite() {
            return Err(Error::NonFinite {
                op: "train",
                detail: format!("epoch {epoch} log: {}", log.to_line()),
            });
        }
        Ok(log)
    }
}

fn annotate(e: Error, epoch: usize, which: &str, step: usize) -> Error {
    match e {
        Error::NonFinite { op, detail } => Error::NonFinite {
            op,
            detail: format!("{detail}; epoch {epoch}, {which} step {step}"),
        },
        other => other,
    }
}

pub fn train(view: &TrainingView, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_observed(view, cfg, None)
}

/// As [`train`], calling `observer` after every generator step.
pub fn train_observed(view: &TrainingView, cfg: &TrainConfig, mut observer: Option<&mut Observer<'_>>) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(view, cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        log.push(trainer.run_epoch(epoch, observer.as_deref_mut())?);
    }
    Ok(TrainOutput {
        model: trainer.model,
        log,
    })
}

#[cfg(test)]
mod tests;
