//! Alternating adversarial training with Adam, checkpoints and exact resume.
//!
//! Each step runs the generator forward once, updates the discriminator on
//! the detached prediction, then updates the generator through the freshly
//! updated (and now frozen) discriminator.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ffad_autograd::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::flow::{FlowError, FlowEstimator, FlowEstimatorSpec, FlowKind};
use crate::frames::{sample_clip, Clip, FrameSequence, IngestError};
use crate::losses::{self, GeneratorTerms, LossBreakdown, LossError, LossWeights};
use crate::predictor::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelError, ParamSet};

pub const CHECKPOINT_KIND: &str = "ffad-train";
const RNG_STREAM: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has no video with at least {0} frames")]
    EmptyDataset(usize),
    #[error("non-finite {term} loss at step {step}: {dump}")]
    NonFiniteLoss { term: &'static str, step: u64, dump: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// History length `t`.
    pub history: usize,
    pub batch: usize,
    /// Square frame side fed to the networks.
    pub resolution: usize,
    /// Channels per frame; `None` takes them from the data.
    pub channels: Option<usize>,
    /// `None` selects 1e-4 (gray) or 2e-4 (color).
    pub lr_g: Option<f64>,
    /// `None` selects 1e-5 (gray) or 2e-5 (color).
    pub lr_d: Option<f64>,
    pub weights: LossWeights,
    pub max_steps: u64,
    pub seed: u64,
    pub flow: FlowEstimatorSpec,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub eval_every: u64,
    pub g_base_width: usize,
    pub g_depth: usize,
    pub d_base_width: usize,
    pub d_stages: usize,
    /// Multiply both learning rates by `lr_decay_factor` every this many steps; 0 disables.
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            history: 4,
            batch: 4,
            resolution: 256,
            channels: None,
            lr_g: None,
            lr_d: None,
            weights: LossWeights::default(),
            max_steps: 3000,
            seed: 0,
            flow: FlowEstimatorSpec::default(),
            eval_every: 500,
            g_base_width: 64,
            g_depth: 4,
            d_base_width: 64,
            d_stages: 4,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

fn auto<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".to_string(), T::to_string)
}

impl TrainConfig {
    /// Learning rates `(generator, discriminator)` at step 0.
    pub fn base_learning_rates(&self, channels: usize) -> (f64, f64) {
        let (g, d) = if channels == 1 { (1e-4, 1e-5) } else { (2e-4, 2e-5) };
        (self.lr_g.unwrap_or(g), self.lr_d.unwrap_or(d))
    }

    pub fn learning_rates(&self, channels: usize, step: u64) -> (f64, f64) {
        let (g, d) = self.base_learning_rates(channels);
        let decay = if self.lr_decay_every == 0 {
            1.0
        } else {
            self.lr_decay_factor.powi((step / self.lr_decay_every) as i32)
        };
        (g * decay, d * decay)
    }

    pub fn generator_config(&self, channels: usize) -> GeneratorConfig {
        GeneratorConfig {
            input_frames: self.history,
            channels_per_frame: channels,
            base_width: self.g_base_width,
            depth: self.g_depth,
        }
    }

    pub fn discriminator_config(&self, channels: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels,
            base_width: self.d_base_width,
            stages: self.d_stages,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.history == 0 || self.batch == 0 {
            return bad("history and batch must be at least 1".into());
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("{name} = {lr} must be positive"));
                }
            }
        }
        if !matches!(self.channels, None | Some(1) | Some(3)) {
            return bad(format!("channels {:?} must be 1 or 3", self.channels));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam coefficients out of range".into());
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive".into());
        }
        self.weights.validate()?;
        if self.flow.kind == FlowKind::SurrogateHs {
            self.flow.validate()?;
        }
        let g = self.generator_config(self.channels.unwrap_or(3));
        g.validate()?;
        g.check_resolution(self.resolution, self.resolution)?;
        let d = self.discriminator_config(self.channels.unwrap_or(3));
        d.validate()?;
        if d.grid_size(self.resolution) == 0 {
            return bad(format!("resolution {} too small for {} discriminator stages", self.resolution, self.d_stages));
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("history", self.history.to_string()),
            ("batch", self.batch.to_string()),
            ("resolution", self.resolution.to_string()),
            ("channels", auto(&self.channels)),
            ("lr_g", auto(&self.lr_g)),
            ("lr_d", auto(&self.lr_d)),
            ("lambda_int", self.weights.intensity.to_string()),
            ("lambda_gd", self.weights.gradient.to_string()),
            ("lambda_op", self.weights.flow.to_string()),
            ("lambda_adv", self.weights.adversarial.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("flow_kind", self.flow.kind.name().to_string()),
            ("flow_iterations", self.flow.iterations.to_string()),
            ("flow_smoothness", self.flow.smoothness.to_string()),
            ("flow_weights", self.flow.weights_path.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("eval_every", self.eval_every.to_string()),
            ("g_base_width", self.g_base_width.to_string()),
            ("g_depth", self.g_depth.to_string()),
            ("d_base_width", self.d_base_width.to_string()),
            ("d_stages", self.d_stages.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value.parse().map_err(|_| TrainError::BadValue {
                key: key.to_string(),
                reason: format!("cannot parse {value:?}"),
            })
        }
        fn opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, TrainError> {
            if value == "auto" {
                Ok(None)
            } else {
                p(key, value).map(Some)
            }
        }
        match key {
            "history" => self.history = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "resolution" => self.resolution = p(key, value)?,
            "channels" => self.channels = opt(key, value)?,
            "lr_g" => self.lr_g = opt(key, value)?,
            "lr_d" => self.lr_d = opt(key, value)?,
            "lambda_int" => self.weights.intensity = p(key, value)?,
            "lambda_gd" => self.weights.gradient = p(key, value)?,
            "lambda_op" => self.weights.flow = p(key, value)?,
            "lambda_adv" => self.weights.adversarial = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "flow_kind" => {
                self.flow.kind = FlowKind::parse(value).ok_or_else(|| TrainError::BadValue {
                    key: key.into(),
                    reason: format!("{value:?} is not surrogate_hs or external_network"),
                })?
            }
            "flow_iterations" => self.flow.iterations = p(key, value)?,
            "flow_smoothness" => self.flow.smoothness = p(key, value)?,
            "flow_weights" => self.flow.weights_path = (value != "none").then(|| PathBuf::from(value)),
            "eval_every" => self.eval_every = p(key, value)?,
            "g_base_width" => self.g_base_width = p(key, value)?,
            "g_depth" => self.g_depth = p(key, value)?,
            "d_base_width" => self.d_base_width = p(key, value)?,
            "d_stages" => self.d_stages = p(key, value)?,
            "lr_decay_every" => self.lr_decay_every = p(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = p(key, value)?,
            "adam_beta1" => self.adam_beta1 = p(key, value)?,
            "adam_beta2" => self.adam_beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            other => return Err(TrainError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::BadValue {
                key: line.to_string(),
                reason: format!("line {} is not key=value", i + 1),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_text(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Adam with bias correction; moments are kept per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() + eps);
            }
        }
    }

    fn save(&self, ckpt: &mut Checkpoint, prefix: &str, params: &ParamSet<f32>) {
        ckpt.set(&format!("{prefix}.step"), self.step);
        for ((name, m), v) in params.names().iter().zip(&self.m).zip(&self.v) {
            ckpt.push(format!("{prefix}.m.{name}"), m.clone());
            ckpt.push(format!("{prefix}.v.{name}"), v.clone());
        }
    }

    fn load(ckpt: &Checkpoint, prefix: &str, params: &ParamSet<f32>, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let m = ckpt.params(&format!("{prefix}.m"), params.names())?;
        let v = ckpt.params(&format!("{prefix}.v"), params.names())?;
        Ok(Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: ckpt.parse(&format!("{prefix}.step"))?,
            m: m.tensors().to_vec(),
            v: v.tensors().to_vec(),
        })
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub rng: ChaCha8Rng,
}

/// Points at which the update observer is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    BeforeDiscriminator,
    AfterDiscriminator,
    BeforeGenerator,
    AfterGenerator,
}

pub type UpdateObserver = Box<dyn FnMut(Phase, &TrainState)>;

pub struct Trainer {
    pub config: TrainConfig,
    pub channels: usize,
    pub state: TrainState,
    flow: FlowEstimator,
    observer: Option<UpdateObserver>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("config", &self.config)
            .field("channels", &self.channels)
            .field("step", &self.state.step)
            .finish_non_exhaustive()
    }
}

fn stack(frames: &[&crate::frames::Frame]) -> Tensor<f32> {
    let (c, h, w) = frames[0].dims();
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[frames.len(), c, h, w], data).unwrap()
}

/// Generator input `[B, t*C, H, W]`, target `[B, C, H, W]` and last history frame `[B, C, H, W]`.
pub fn batch_tensors(batch: &[Clip]) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let t = batch[0].frames.len() - 1;
    let (c, h, w) = batch[0].frames[0].dims();
    let mut input = Vec::with_capacity(batch.len() * t * c * h * w);
    for clip in batch {
        for f in clip.history() {
            input.extend_from_slice(f.data());
        }
    }
    let target = stack(&batch.iter().map(Clip::target).collect::<Vec<_>>());
    let prev = stack(&batch.iter().map(|c| &c.frames[t - 1]).collect::<Vec<_>>());
    (Tensor::from_vec(&[batch.len(), t * c, h, w], input).unwrap(), target, prev)
}

fn rng_to_meta(rng: &ChaCha8Rng, ckpt: &mut Checkpoint) {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    ckpt.set("rng.algorithm", "chacha8");
    ckpt.set("rng.seed", seed);
    ckpt.set("rng.stream", rng.get_stream());
    ckpt.set("rng.word_pos", rng.get_word_pos());
}

fn rng_from_meta(ckpt: &Checkpoint) -> Result<ChaCha8Rng, TrainError> {
    let hex = ckpt.get("rng.seed")?;
    if hex.len() != 64 {
        return Err(CheckpointError::Corrupt("rng.seed must be 64 hex digits".into()).into());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| CheckpointError::Corrupt("rng.seed is not hex".into()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(ckpt.parse("rng.stream")?);
    rng.set_word_pos(ckpt.parse("rng.word_pos")?);
    Ok(rng)
}

impl Trainer {
    pub fn new(config: TrainConfig, channels: usize) -> Result<Self, TrainError> {
        let config = TrainConfig {
            channels: Some(channels),
            ..config
        };
        config.validate()?;
        let generator = Generator::new(config.generator_config(channels), config.seed)?;
        let discriminator = Discriminator::new(config.discriminator_config(channels), config.seed)?;
        let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(RNG_STREAM);
        let state = TrainState {
            step: 0,
            adam_g: Adam::new(&generator.params, b1, b2, eps),
            adam_d: Adam::new(&discriminator.params, b1, b2, eps),
            generator,
            discriminator,
            rng,
        };
        let flow = FlowEstimator::from_spec(&config.flow)?;
        Ok(Self {
            config,
            channels,
            state,
            flow,
            observer: None,
        })
    }

    pub fn set_observer(&mut self, observer: UpdateObserver) {
        self.observer = Some(observer);
    }

    pub fn flow(&self) -> &FlowEstimator {
        &self.flow
    }

    fn notify(&mut self, phase: Phase) {
        if let Some(obs) = self.observer.as_mut() {
            obs(phase, &self.state);
        }
    }

    /// Draws `batch` clips, each from a uniformly chosen eligible video.
    pub fn sample_batch(&mut self, videos: &[FrameSequence]) -> Result<Vec<Clip>, TrainError> {
        let need = self.config.history + 1;
        let eligible: Vec<&FrameSequence> = videos.iter().filter(|v| v.len() >= need).collect();
        if eligible.is_empty() {
            return Err(TrainError::EmptyDataset(need));
        }
        (0..self.config.batch)
            .map(|_| {
                let v = eligible[self.state.rng.random_range(0..eligible.len())];
                Ok(sample_clip(v, self.config.history, &mut self.state.rng)?)
            })
            .collect()
    }

    fn check_batch(&self, batch: &[Clip]) -> Result<(), TrainError> {
        let want = (self.channels, self.config.resolution, self.config.resolution);
        for clip in batch {
            if clip.frames.len() != self.config.history + 1 {
                return Err(ModelError::Shape(format!("clip of {} frames, expected {}", clip.frames.len(), self.config.history + 1)).into());
            }
            if let Some(f) = clip.frames.iter().find(|f| f.dims() != want) {
                return Err(ModelError::Shape(format!("frame {:?}, expected {want:?}", f.dims())).into());
            }
        }
        if batch.is_empty() {
            return Err(ModelError::Shape("empty batch".into()).into());
        }
        Ok(())
    }

    fn non_finite(&self, term: &'static str, b: &LossBreakdown) -> TrainError {
        let mut dump = String::new();
        for (name, v) in b.components() {
            let _ = write!(dump, "{name}={v} ");
        }
        TrainError::NonFiniteLoss {
            term,
            step: self.state.step,
            dump: dump.trim_end().to_string(),
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[Clip]) -> Result<LossBreakdown, TrainError> {
        self.check_batch(batch)?;
        let (input, target, prev) = batch_tensors(batch);
        let (lr_g, lr_d) = self.config.learning_rates(self.channels, self.state.step);
        let w = self.config.weights;
        let gcfg = self.state.generator.config;
        let dcfg = self.state.discriminator.config;
        let mut out = LossBreakdown::default();

        let mut gt = Tape::<f32>::new();
        let gp = self.state.generator.params.attach(&mut gt, true);
        let x = gt.constant(input);
        let pred = gcfg.forward(&mut gt, &gp, x);

        self.notify(Phase::BeforeDiscriminator);
        {
            let mut dt = Tape::<f32>::new();
            let dp = self.state.discriminator.params.attach(&mut dt, true);
            let real = dt.constant(target.clone());
            let fake = dt.constant(gt.value(pred).clone());
            let sr = dcfg.forward(&mut dt, &dp, real);
            let sf = dcfg.forward(&mut dt, &dp, fake);
            let ld = losses::discriminator_objective(&mut dt, sr, sf)?;
            out.d = dt.value(ld).item() as f64;
            if !out.d.is_finite() {
                return Err(self.non_finite("d", &out));
            }
            let mut grads = dt.backward(ld);
            let grads: Vec<Tensor<f32>> = dp.iter().map(|&v| grads.take(v).expect("leaf gradient")).collect();
            self.state.adam_d.update(&mut self.state.discriminator.params, &grads, lr_d);
        }
        self.notify(Phase::AfterDiscriminator);

        self.notify(Phase::BeforeGenerator);
        let gtv = gt.constant(target);
        let prevv = gt.constant(prev);
        let int = losses::intensity(&mut gt, pred, gtv)?;
        let gd = losses::gradient(&mut gt, pred, gtv)?;
        let op = {
            let flow_gt = {
                let mut ft = Tape::<f32>::new();
                let (a, b) = (ft.constant(gt.value(gtv).clone()), ft.constant(gt.value(prevv).clone()));
                let f = self.flow.estimate_on_tape(&mut ft, a, b);
                ft.value(f).clone()
            };
            let fg = gt.constant(flow_gt);
            if w.flow > 0.0 {
                let fp = self.flow.estimate_on_tape(&mut gt, pred, prevv);
                losses::flow(&mut gt, fp, fg)?
            } else {
                let mut ft = Tape::<f32>::new();
                let (a, b) = (ft.constant(gt.value(pred).clone()), ft.constant(gt.value(prevv).clone()));
                let f = self.flow.estimate_on_tape(&mut ft, a, b);
                let fp = gt.constant(ft.value(f).clone());
                losses::flow(&mut gt, fp, fg)?
            }
        };
        let dp = self.state.discriminator.params.attach(&mut gt, false);
        let sf = dcfg.forward(&mut gt, &dp, pred);
        let adv = losses::adversarial_g(&mut gt, sf);
        let terms = GeneratorTerms { int, gd, op, adv };
        let total = losses::generator_objective(&mut gt, &terms, &w)?;
        out.int = gt.value(int).item() as f64;
        out.gd = gt.value(gd).item() as f64;
        out.op = gt.value(op).item() as f64;
        out.adv_g = gt.value(adv).item() as f64;
        out.total_g = gt.value(total).item() as f64;
        for (name, v) in [("int", out.int), ("gd", out.gd), ("op", out.op), ("adv_g", out.adv_g), ("total_g", out.total_g)] {
            if !v.is_finite() {
                return Err(self.non_finite(name, &out));
            }
        }
        let mut grads = gt.backward(total);
        let grads: Vec<Tensor<f32>> = gp
            .iter()
            .zip(self.state.generator.params.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        self.state.adam_g.update(&mut self.state.generator.params, &grads, lr_g);
        self.notify(Phase::AfterGenerator);
        self.state.step += 1;
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("kind", CHECKPOINT_KIND);
        for (k, v) in self.config.to_pairs() {
            c.set(&format!("config.{k}"), v);
        }
        c.set("config_hash", self.config.hash());
        c.set("step", self.state.step);
        c.set("g.count", self.state.generator.count_parameters());
        c.set("d.count", self.state.discriminator.count_parameters());
        rng_to_meta(&self.state.rng, &mut c);
        c.push_params("g", &self.state.generator.params);
        c.push_params("d", &self.state.discriminator.params);
        self.state.adam_g.save(&mut c, "adam_g", &self.state.generator.params);
        self.state.adam_d.save(&mut c, "adam_d", &self.state.discriminator.params);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let config = config_from_checkpoint(ckpt)?;
        let channels = config.channels.ok_or_else(|| CheckpointError::Missing("config.channels".into()))?;
        let generator = load_generator_with(ckpt, &config, channels)?;
        let dcfg = config.discriminator_config(channels);
        let d_params = ckpt.params("d", &dcfg.parameter_names())?;
        let discriminator = Discriminator::from_params(dcfg, d_params)?;
        if ckpt.parse::<usize>("d.count")? != discriminator.count_parameters() {
            return Err(CheckpointError::Corrupt("discriminator parameter count mismatch".into()).into());
        }
        let state = TrainState {
            step: ckpt.parse("step")?,
            adam_g: Adam::load(ckpt, "adam_g", &generator.params, &config)?,
            adam_d: Adam::load(ckpt, "adam_d", &discriminator.params, &config)?,
            generator,
            discriminator,
            rng: rng_from_meta(ckpt)?,
        };
        let flow = FlowEstimator::from_spec(&config.flow)?;
        Ok(Self {
            config,
            channels,
            state,
            flow,
            observer: None,
        })
    }
}

pub fn config_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainConfig, TrainError> {
    if ckpt.get("kind")? != CHECKPOINT_KIND {
        return Err(CheckpointError::Corrupt(format!("kind {} is not a training checkpoint", ckpt.get("kind")?)).into());
    }
    let mut config = TrainConfig::default();
    for (k, v) in &ckpt.meta {
        if let Some(key) = k.strip_prefix("config.") {
            config.set(key, v)?;
        }
    }
    Ok(config)
}

fn load_generator_with(ckpt: &Checkpoint, config: &TrainConfig, channels: usize) -> Result<Generator, TrainError> {
    let gcfg = config.generator_config(channels);
    let params = ckpt.params("g", &gcfg.parameter_names())?;
    let g = Generator::from_params(gcfg, params)?;
    if ckpt.parse::<usize>("g.count")? != g.count_parameters() {
        return Err(CheckpointError::Corrupt("generator parameter count mismatch".into()).into());
    }
    Ok(g)
}

/// The generator and training config stored in a checkpoint.
pub fn load_generator(ckpt: &Checkpoint) -> Result<(Generator, TrainConfig), TrainError> {
    let config = config_from_checkpoint(ckpt)?;
    let channels = config.channels.ok_or_else(|| CheckpointError::Missing("config.channels".into()))?;
    Ok((load_generator_with(ckpt, &config, channels)?, config))
}

/// Where [`train`] writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Directory for `train_log.csv`, `step_<n>.ckpt` and `final.ckpt`.
    pub dir: Option<PathBuf>,
}

/// Per-step losses of a run.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<(u64, LossBreakdown)>,
}

impl TrainHistory {
    /// Trailing moving average of `total_g` over `window` steps, indexed like `records`.
    pub fn smoothed_total(&self, window: usize) -> Vec<f64> {
        let v: Vec<f64> = self.records.iter().map(|(_, b)| b.total_g).collect();
        moving_average(&v, window)
    }
}

pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(v.len());
    let mut sum = 0.0;
    for i in 0..v.len() {
        sum += v[i];
        if i >= window {
            sum -= v[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Checks the data against the config and returns the channel count.
pub fn dataset_channels(config: &TrainConfig, videos: &[FrameSequence]) -> Result<usize, TrainError> {
    let need = config.history + 1;
    let first = videos
        .iter()
        .find(|v| v.len() >= need)
        .ok_or(TrainError::EmptyDataset(need))?;
    let c = first.channels().unwrap();
    if let Some(want) = config.channels {
        if want != c {
            return Err(TrainError::Config(format!("config says {want} channels, data has {c}")));
        }
    }
    for v in videos {
        if let Some(f) = v.frames.iter().find(|f| f.dims() != (c, config.resolution, config.resolution)) {
            return Err(TrainError::Config(format!(
                "video {} has {:?} frames, config expects {:?}",
                v.video_id,
                f.dims(),
                (c, config.resolution, config.resolution)
            )));
        }
    }
    Ok(c)
}

/// Runs `trainer` until `config.max_steps`, logging and checkpointing into `outputs`.
pub fn run(trainer: &mut Trainer, videos: &[FrameSequence], outputs: &TrainOutputs) -> Result<(Checkpoint, TrainHistory), TrainError> {
    run_with(trainer, videos, outputs, &mut |_, _| {})
}

/// [`run`] with a callback after every step.
pub fn run_with(
    trainer: &mut Trainer,
    videos: &[FrameSequence],
    outputs: &TrainOutputs,
    on_step: &mut dyn FnMut(u64, &LossBreakdown),
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    let mut log = match &outputs.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("train_log.csv");
            let fresh = trainer.state.step == 0 || !path.exists();
            let file = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(io_err(&path))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{}", LossBreakdown::LOG_HEADER).map_err(io_err(&path))?;
            }
            Some((w, path))
        }
        None => None,
    };
    let mut history = TrainHistory::default();
    while trainer.state.step < trainer.config.max_steps {
        let batch = trainer.sample_batch(videos)?;
        let b = trainer.train_step(&batch)?;
        let step = trainer.state.step;
        history.records.push((step, b));
        on_step(step, &b);
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", b.log_line(step)).map_err(io_err(path))?;
        }
        if let Some(dir) = &outputs.dir {
            if trainer.config.eval_every > 0 && step % trainer.config.eval_every == 0 && step < trainer.config.max_steps {
                if let Some((w, path)) = log.as_mut() {
                    w.flush().map_err(io_err(path))?;
                }
                trainer.to_checkpoint().save(&dir.join(format!("step_{step:06}.ckpt")))?;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(io_err(&path))?;
    }
    let ckpt = trainer.to_checkpoint();
    if let Some(dir) = &outputs.dir {
        ckpt.save(&dir.join("final.ckpt"))?;
    }
    Ok((ckpt, history))
}

/// Trains from scratch on `videos`.
pub fn train(config: &TrainConfig, videos: &[FrameSequence], outputs: &TrainOutputs) -> Result<(Checkpoint, TrainHistory), TrainError> {
    let channels = dataset_channels(config, videos)?;
    let mut trainer = Trainer::new(config.clone(), channels)?;
    run(&mut trainer, videos, outputs)
}

/// Continues a run from a checkpoint until `max_steps` (overridable).
pub fn resume(
    ckpt: &Checkpoint,
    max_steps: Option<u64>,
    videos: &[FrameSequence],
    outputs: &TrainOutputs,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    if let Some(m) = max_steps {
        trainer.config.max_steps = m;
    }
    dataset_channels(&trainer.config, videos)?;
    run(&mut trainer, videos, outputs)
}
