//! Conditional feature generator, two-headed critic and the feature
//! extractor built on the critic trunk.

use std::path::Path;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{row_mean, scaled_l2_normalize, Gradients, Matrix, Parameter, Tape, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub noise_dim: usize,
    pub descriptor_dim: usize,
    pub feature_dim: usize,
    pub num_seen: usize,
    /// Hidden widths of the generator, input to output.
    pub generator_hidden: Vec<usize>,
    /// Hidden width of the critic trunk.
    pub critic_hidden: usize,
    /// Adds a (K+1)-th logit to the class head.
    pub extra_class: bool,
    /// Norm of extracted features.
    pub beta: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    pub fn new(descriptor_dim: usize, feature_dim: usize, num_seen: usize) -> Self {
        ModelConfig {
            noise_dim: 128,
            descriptor_dim,
            feature_dim,
            num_seen,
            generator_hidden: vec![256, 256],
            critic_hidden: 256,
            extra_class: false,
            beta: 3.0,
            leaky_slope: 0.2,
        }
    }

    pub fn num_logits(&self) -> usize {
        self.num_seen + usize::from(self.extra_class)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("noise_dim", self.noise_dim),
            ("descriptor_dim", self.descriptor_dim),
            ("feature_dim", self.feature_dim),
            ("critic_hidden", self.critic_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.generator_hidden.contains(&0) {
            return Err(Error::Config("generator hidden widths must be positive".into()));
        }
        if self.num_seen < 2 {
            return Err(Error::Config("need at least two seen classes".into()));
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::Config("beta must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| dist.sample(rng));
        let bias = Matrix::from_fn(1, fan_out, |_, _| dist.sample(rng));
        Linear {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.cols()
    }
}

/// Layer parameters placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    fn bind(layer: &Linear, tape: &'t Tape, trainable: bool) -> Self {
        let place = |p: &Parameter| {
            if trainable {
                tape.var(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        };
        BoundLinear {
            weight: place(&layer.weight),
            bias: place(&layer.bias),
        }
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight)?.add_row(self.bias)
    }
}

fn write_grads(layers: &mut [&mut Linear], bound: &[BoundLinear<'_>], grads: &Gradients) -> Result<()> {
    for (layer, b) in layers.iter_mut().zip(bound) {
        layer.weight.set_grad(grads.get(b.weight))?;
        layer.bias.set_grad(grads.get(b.bias))?;
    }
    Ok(())
}

/// `G([z ; s])`: leaky-rectified hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub noise_dim: usize,
    pub descriptor_dim: usize,
    pub layers: Vec<Linear>,
    pub leaky_slope: f64,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut widths = vec![cfg.noise_dim + cfg.descriptor_dim];
        widths.extend(&cfg.generator_hidden);
        widths.push(cfg.feature_dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("generator.{i}"), w[0], w[1], rng))
            .collect();
        Generator {
            noise_dim: cfg.noise_dim,
            descriptor_dim: cfg.descriptor_dim,
            layers,
            leaky_slope: cfg.leaky_slope,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundGenerator<'t> {
        BoundGenerator {
            layers: self
                .layers
                .iter()
                .map(|l| BoundLinear::bind(l, tape, trainable))
                .collect(),
            noise_dim: self.noise_dim,
            descriptor_dim: self.descriptor_dim,
            slope: self.leaky_slope,
        }
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn store_grads(&mut self, bound: &BoundGenerator<'_>, grads: &Gradients) -> Result<()> {
        let mut layers: Vec<&mut Linear> = self.layers.iter_mut().collect();
        write_grads(&mut layers, &bound.layers, grads)
    }
}

pub struct BoundGenerator<'t> {
    pub layers: Vec<BoundLinear<'t>>,
    noise_dim: usize,
    descriptor_dim: usize,
    slope: f64,
}

impl<'t> BoundGenerator<'t> {
    /// One generated feature row per row of `(z, s)`.
    pub fn generate(&self, descriptors: Var<'t>, noise: Var<'t>) -> Result<Var<'t>> {
        let (s, z) = (descriptors.shape(), noise.shape());
        if s.1 != self.descriptor_dim || z.1 != self.noise_dim || s.0 != z.0 {
            return Err(Error::dim("generate", z, s));
        }
        let mut h = noise.hconcat(descriptors)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h)?;
            if i < last {
                h = h.leaky_relu(self.slope)?;
            }
        }
        Ok(h)
    }
}

/// Critic trunk with an unbounded real/fake score head and a class head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub trunk: Linear,
    pub real_head: Linear,
    pub class_head: Linear,
    pub leaky_slope: f64,
}

/// Outputs of one critic pass.
#[derive(Debug, Clone, Copy)]
pub struct CriticOutput<'t> {
    /// n x 1.
    pub real_score: Var<'t>,
    /// n x K (or K+1).
    pub class_logits: Var<'t>,
    /// n x trunk width, before normalization.
    pub trunk: Var<'t>,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        Discriminator {
            trunk: Linear::new("critic.trunk", cfg.feature_dim, cfg.critic_hidden, rng),
            real_head: Linear::new("critic.real", cfg.critic_hidden, 1, rng),
            class_head: Linear::new("critic.class", cfg.critic_hidden, cfg.num_logits(), rng),
            leaky_slope: cfg.leaky_slope,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.fan_in()
    }

    pub fn trunk_width(&self) -> usize {
        self.trunk.fan_out()
    }

    pub fn num_logits(&self) -> usize {
        self.class_head.fan_out()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundDiscriminator<'t> {
        BoundDiscriminator {
            trunk: BoundLinear::bind(&self.trunk, tape, trainable),
            real_head: BoundLinear::bind(&self.real_head, tape, trainable),
            class_head: BoundLinear::bind(&self.class_head, tape, trainable),
            input_dim: self.input_dim(),
            slope: self.leaky_slope,
        }
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        [&mut self.trunk, &mut self.real_head, &mut self.class_head]
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        [&self.trunk, &self.real_head, &self.class_head]
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn store_grads(&mut self, bound: &BoundDiscriminator<'_>, grads: &Gradients) -> Result<()> {
        let mut layers = [&mut self.trunk, &mut self.real_head, &mut self.class_head];
        write_grads(&mut layers, &[bound.trunk, bound.real_head, bound.class_head], grads)
    }
}

pub struct BoundDiscriminator<'t> {
    pub trunk: BoundLinear<'t>,
    pub real_head: BoundLinear<'t>,
    pub class_head: BoundLinear<'t>,
    input_dim: usize,
    slope: f64,
}

impl<'t> BoundDiscriminator<'t> {
    pub fn trunk_features(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.shape().1 != self.input_dim {
            return Err(Error::dim(
                "discriminate",
                x.shape(),
                crate::error::Shape(x.shape().0, self.input_dim),
            ));
        }
        self.trunk.forward(x)?.leaky_relu(self.slope)
    }

    pub fn discriminate(&self, x: Var<'t>) -> Result<CriticOutput<'t>> {
        let trunk = self.trunk_features(x)?;
        Ok(CriticOutput {
            real_score: self.real_head.forward(trunk)?,
            class_logits: self.class_head.forward(trunk)?,
            trunk,
        })
    }

    pub fn real_score(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.real_head.forward(self.trunk_features(x)?)
    }

    /// Trunk features rescaled to norm `beta`.
    pub fn extract_phi(&self, x: Var<'t>, beta: f64) -> Result<Var<'t>> {
        scaled_l2_normalize(self.trunk_features(x)?, beta)
    }
}

/// Real samples frozen once per class; their mean feature is the class
/// center.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    /// One m x d block per seen class.
    pub samples: Vec<Matrix>,
}

impl EpisodicMemory {
    /// Picks `m` rows per class without replacement.
    pub fn sample(features: &Matrix, labels: &[usize], num_classes: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("episodic memory size must be positive".into()));
        }
        let mut samples = Vec::with_capacity(num_classes);
        for class in 0..num_classes {
            let rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter_map(|(i, &l)| (l == class).then_some(i))
                .collect();
            if rows.len() < m {
                return Err(Error::Config(format!(
                    "class {class} has {} samples, episodic memory needs {m}",
                    rows.len()
                )));
            }
            let picked = rand::seq::index::sample(rng, rows.len(), m)
                .into_iter()
                .map(|i| rows[i])
                .collect::<Vec<_>>();
            samples.push(features.select_rows(&picked)?);
        }
        Ok(EpisodicMemory { samples })
    }

    pub fn size(&self) -> usize {
        self.samples.first().map_or(0, Matrix::rows)
    }
}

/// Generator and critic together with their configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(&config, rng);
        let discriminator = Discriminator::new(&config, rng);
        Ok(Model {
            config,
            generator,
            discriminator,
        })
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }

    /// Evaluates the generator on plain matrices.
    pub fn generate(&self, descriptors: &Matrix, noise: &Matrix) -> Result<Matrix> {
        let tape = Tape::new();
        let g = self.generator.bind(&tape, false);
        let out = g.generate(tape.constant(descriptors.clone()), tape.constant(noise.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Returns `(real_score, class_logits, trunk)` for each row of `x`.
    pub fn discriminate(&self, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let tape = Tape::new();
        let d = self.discriminator.bind(&tape, false);
        let out = d.discriminate(tape.constant(x.clone()))?;
        Ok((
            (*out.real_score.value()).clone(),
            (*out.class_logits.value()).clone(),
            (*out.trunk.value()).clone(),
        ))
    }

    pub fn extract_phi(&self, x: &Matrix) -> Result<Matrix> {
        let tape = Tape::new();
        let d = self.discriminator.bind(&tape, false);
        Ok((*d.extract_phi(tape.constant(x.clone()), self.beta())?.value()).clone())
    }

    pub fn class_centers(&self, descriptors: &Matrix) -> Result<Matrix> {
        let tape = Tape::new();
        let g = self.generator.bind(&tape, false);
        let d = self.discriminator.bind(&tape, false);
        let c = class_centers(&g, &d, tape.constant(descriptors.clone()), self.beta())?;
        Ok((*c.value()).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::Gan(self.clone()).save(path)
    }
}

/// `phi(G(0, s_i))` for every descriptor row.
pub fn class_centers<'t>(
    generator: &BoundGenerator<'t>,
    critic: &BoundDiscriminator<'t>,
    descriptors: Var<'t>,
    beta: f64,
) -> Result<Var<'t>> {
    let tape = descriptors.tape();
    let zeros = tape.constant(Matrix::zeros(descriptors.shape().0, generator.noise_dim));
    let features = generator.generate(descriptors, zeros)?;
    critic.extract_phi(features, beta)
}

/// Per-class mean of `phi` over the stored samples; features are
/// recomputed from the current critic on every call.
pub fn episodic_centers<'t>(
    critic: &BoundDiscriminator<'t>,
    memory: &EpisodicMemory,
    tape: &'t Tape,
    beta: f64,
) -> Result<Var<'t>> {
    let mut centers: Option<Var<'t>> = None;
    let mut rows = Vec::with_capacity(memory.samples.len());
    for block in &memory.samples {
        let phi = critic.extract_phi(tape.constant(block.clone()), beta)?;
        rows.push(row_mean(phi)?);
    }
    for row in rows {
        centers = Some(match centers {
            None => row,
            Some(acc) => vstack(acc, row)?,
        });
    }
    centers.ok_or_else(|| Error::Config("episodic memory is empty".into()))
}

/// Vertical stack built from transposes and a horizontal concat.
fn vstack<'t>(top: Var<'t>, bottom: Var<'t>) -> Result<Var<'t>> {
    top.t()?.hconcat(bottom.t()?)?.t()
}

const CHECKPOINT_FORMAT: &str = "grawd-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Anything the evaluator can draw class features from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Checkpoint {
    Gan(Model),
    /// Returns the stored class mean for every draw; an upper-bound
    /// reference for evaluation.
    ClassMeans { means: Matrix },
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    checkpoint: Checkpoint,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let env = Envelope {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            checkpoint: self.clone(),
        };
        serde_json::to_string(&env).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if env.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", env.format)));
        }
        if env.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", env.version)));
        }
        if let Checkpoint::Gan(model) = &env.checkpoint {
            model.config.validate()?;
        }
        Ok(env.checkpoint)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
