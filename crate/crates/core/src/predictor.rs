//! U-Net future-frame generator and patch discriminator.
//!
//! Both networks are described by an ordered parameter layout; the forward
//! passes consume parameters in exactly that order, so a [`ParamSet`] can be
//! attached to any tape (as trainable leaves or frozen constants) at any
//! precision.

use ffad_autograd::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::frames::Frame;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Named tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Adds every tensor to the tape, as leaves when `trainable`, else as constants.
    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(Scalar::to_f64(*v).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// How a layer's weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `±sqrt(gain / fan_in)`.
    Uniform { fan_in: f64, gain: f64 },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// ReLU layers use gain 6 (He uniform); squashing heads use gain 3.
const RELU_GAIN: f64 = 6.0;
const HEAD_GAIN: f64 = 3.0;

fn conv_slots(slots: &mut Vec<Slot>, name: &str, co: usize, ci: usize, k: usize, gain: f64) {
    slots.push(Slot {
        name: format!("{name}.weight"),
        shape: vec![co, ci, k, k],
        init: Init::Uniform {
            fan_in: (ci * k * k) as f64,
            gain,
        },
    });
    slots.push(Slot {
        name: format!("{name}.bias"),
        shape: vec![co],
        init: Init::Zero,
    });
}

fn init_params(slots: &[Slot], seed: u64, stream: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut names = Vec::with_capacity(slots.len());
    let mut tensors = Vec::with_capacity(slots.len());
    for s in slots {
        let n: usize = s.shape.iter().product();
        let data = match s.init {
            Init::Zero => vec![0f32; n],
            Init::Uniform { fan_in, gain } => {
                let bound = (gain / fan_in).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            }
        };
        names.push(s.name.clone());
        tensors.push(Tensor::from_vec(&s.shape, data).expect("slot shape"));
    }
    ParamSet { names, tensors }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Frames of history `t`.
    pub input_frames: usize,
    pub channels_per_frame: usize,
    /// Feature channels at the first level; level `l` has `base_width * 2^l`.
    pub base_width: usize,
    /// Resolution levels; `depth - 1` poolings.
    pub depth: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_frames: 4,
            channels_per_frame: 3,
            base_width: 64,
            depth: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_frames == 0 || self.base_width == 0 || self.depth == 0 {
            return Err(ModelError::Config(format!("{self:?}")));
        }
        if self.channels_per_frame != 1 && self.channels_per_frame != 3 {
            return Err(ModelError::Config(format!("{} channels per frame", self.channels_per_frame)));
        }
        if self.depth > 12 {
            return Err(ModelError::Config(format!("depth {} too large", self.depth)));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.input_frames * self.channels_per_frame
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Resolutions must survive `depth - 1` halvings exactly.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<(), ModelError> {
        let m = 1usize << (self.depth - 1);
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(ModelError::Shape(format!("{h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    fn slots(&self) -> Vec<Slot> {
        let mut s = Vec::new();
        let mut cin = self.in_channels();
        for l in 0..self.depth {
            let w = self.width(l);
            conv_slots(&mut s, &format!("enc{l}.conv0"), w, cin, 3, RELU_GAIN);
            conv_slots(&mut s, &format!("enc{l}.conv1"), w, w, 3, RELU_GAIN);
            cin = w;
        }
        for l in (0..self.depth - 1).rev() {
            let (w, below) = (self.width(l), self.width(l + 1));
            // transposed weights are [in, out, k, k]; each output sees in*k*k/4 taps
            s.push(Slot {
                name: format!("dec{l}.up.weight"),
                shape: vec![below, w, 3, 3],
                init: Init::Uniform {
                    fan_in: (below * 9) as f64 / 4.0,
                    gain: RELU_GAIN,
                },
            });
            s.push(Slot {
                name: format!("dec{l}.up.bias"),
                shape: vec![w],
                init: Init::Zero,
            });
            conv_slots(&mut s, &format!("dec{l}.conv0"), w, 2 * w, 3, RELU_GAIN);
            conv_slots(&mut s, &format!("dec{l}.conv1"), w, w, 3, RELU_GAIN);
        }
        conv_slots(&mut s, "head", self.channels_per_frame, self.width(0), 3, HEAD_GAIN);
        s
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.slots().into_iter().map(|s| s.name).collect()
    }

    /// `input [N, t*C, H, W]` to prediction `[N, C, H, W]` in `[-1, 1]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Var {
        let mut p = params.iter().copied();
        let conv_relu = |tape: &mut Tape<T>, h: Var, p: &mut dyn Iterator<Item = Var>| {
            let (w, b) = (p.next().unwrap(), p.next().unwrap());
            let y = tape.conv2d(h, w, Some(b), 1, 1);
            tape.relu(y)
        };
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = input;
        for l in 0..self.depth {
            if l > 0 {
                h = tape.max_pool2x2(h);
            }
            h = conv_relu(tape, h, &mut p);
            h = conv_relu(tape, h, &mut p);
            skips.push(h);
        }
        skips.pop();
        while let Some(skip) = skips.pop() {
            let (w, b) = (p.next().unwrap(), p.next().unwrap());
            let up = tape.conv_transpose2d(h, w, Some(b), 2, 1, 1);
            let up = tape.relu(up);
            assert_eq!(tape.shape(up)[2..], tape.shape(skip)[2..], "skip connection resolution mismatch");
            h = tape.concat_channels(&[skip, up]);
            h = conv_relu(tape, h, &mut p);
            h = conv_relu(tape, h, &mut p);
        }
        let (w, b) = (p.next().unwrap(), p.next().unwrap());
        assert!(p.next().is_none(), "unused generator parameters");
        let y = tape.conv2d(h, w, Some(b), 1, 1);
        tape.tanh(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet<f32>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            config,
            params: init_params(&config.slots(), seed, 0),
        })
    }

    pub fn from_params(config: GeneratorConfig, params: ParamSet<f32>) -> Result<Self, ModelError> {
        config.validate()?;
        check_layout(&config.slots(), &params)?;
        Ok(Self { config, params })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Batched inference: `[N, t*C, H, W]` to `[N, C, H, W]`.
    pub fn predict_batch(&self, input: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let (_, c, h, w) = input.dims4().map_err(|e| ModelError::Shape(e.to_string()))?;
        if c != self.config.in_channels() {
            return Err(ModelError::Shape(format!("{c} input channels, expected {}", self.config.in_channels())));
        }
        self.config.check_resolution(h, w)?;
        let mut tape = Tape::new();
        let p = self.params.attach(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.config.forward(&mut tape, &p, x);
        Ok(tape.value(y).clone())
    }

    pub fn predict_next(&self, history: &[Frame]) -> Result<Frame, ModelError> {
        if history.len() != self.config.input_frames {
            return Err(ModelError::Shape(format!("{} history frames, expected {}", history.len(), self.config.input_frames)));
        }
        let x = stack_history(history)?;
        let y = self.predict_batch(&x)?;
        Frame::from_tensor(&y).map_err(|e| ModelError::Shape(e.to_string()))
    }
}

/// Concatenates frames along channels in temporal order: `[1, t*C, H, W]`.
pub fn stack_history(frames: &[Frame]) -> Result<Tensor<f32>, ModelError> {
    let first = frames.first().ok_or_else(|| ModelError::Shape("empty history".into()))?;
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        if f.dims() != (c, h, w) {
            return Err(ModelError::Shape(format!("history frame {:?} differs from {:?}", f.dims(), (c, h, w))));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[1, frames.len() * c, h, w], data).map_err(|e| ModelError::Shape(e.to_string()))
}

fn check_layout(slots: &[Slot], params: &ParamSet<f32>) -> Result<(), ModelError> {
    if slots.len() != params.len() {
        return Err(ModelError::Shape(format!("{} tensors, layout expects {}", params.len(), slots.len())));
    }
    for (s, (name, t)) in slots.iter().zip(params.iter()) {
        if s.name != name || s.shape != t.shape() {
            return Err(ModelError::Shape(format!(
                "tensor {name} {:?} does not match layout {} {:?}",
                t.shape(),
                s.name,
                s.shape
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    /// Width of the first stage; stage `i` has `min(base * 2^i, 8 * base)`.
    pub base_width: usize,
    /// Stride-2 stages, each halving the resolution.
    pub stages: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_width: 64,
            stages: 4,
        }
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.base_width == 0 || (self.channels != 1 && self.channels != 3) || self.stages > 12 {
            return Err(ModelError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        (self.base_width << stage).min(8 * self.base_width)
    }

    /// Score-grid size for an input side length; `k4 s2 p1` maps `n` to `n / 2`
    /// (floor), and the `k3 s1 p1` head preserves size.
    pub fn grid_size(&self, side: usize) -> usize {
        (0..self.stages).fold(side, |n, _| (n + 2 - 4) / 2 + 1)
    }

    /// Side length of the input patch seen by one output score.
    pub fn receptive_field(&self) -> usize {
        // head k3 s1, then back through each k4 s2 stage
        let mut rf = 3;
        for _ in 0..self.stages {
            rf = (rf - 1) * 2 + 4;
        }
        rf
    }

    fn slots(&self) -> Vec<Slot> {
        let mut s = Vec::new();
        let mut cin = self.channels;
        for i in 0..self.stages {
            let w = self.width(i);
            conv_slots(&mut s, &format!("stage{i}"), w, cin, 4, 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * 3.0);
            cin = w;
        }
        conv_slots(&mut s, "head", 1, cin, 3, HEAD_GAIN);
        s
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.slots().into_iter().map(|s| s.name).collect()
    }

    /// `[N, C, H, W]` frames to `[N, 1, h, w]` patch scores in `[0, 1]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Var {
        let mut p = params.iter().copied();
        let mut h = input;
        for _ in 0..self.stages {
            let (w, b) = (p.next().unwrap(), p.next().unwrap());
            h = tape.conv2d(h, w, Some(b), 2, 1);
            h = tape.leaky_relu(h, T::of(LEAKY_SLOPE));
        }
        let (w, b) = (p.next().unwrap(), p.next().unwrap());
        assert!(p.next().is_none(), "unused discriminator parameters");
        let y = tape.conv2d(h, w, Some(b), 1, 1);
        tape.sigmoid(y)
    }
}

/// Patch scores `[N, 1, h, w]`, one per receptive-field patch.
pub type PatchScoreMap = Tensor<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<f32>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            config,
            params: init_params(&config.slots(), seed, 1),
        })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamSet<f32>) -> Result<Self, ModelError> {
        config.validate()?;
        check_layout(&config.slots(), &params)?;
        Ok(Self { config, params })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    pub fn discriminate_batch(&self, frames: &Tensor<f32>) -> Result<PatchScoreMap, ModelError> {
        let (_, c, h, w) = frames.dims4().map_err(|e| ModelError::Shape(e.to_string()))?;
        if c != self.config.channels {
            return Err(ModelError::Shape(format!("{c} channels, expected {}", self.config.channels)));
        }
        if self.config.grid_size(h) == 0 || self.config.grid_size(w) == 0 {
            return Err(ModelError::Shape(format!("{h}x{w} too small for {} stages", self.config.stages)));
        }
        let mut tape = Tape::new();
        let p = self.params.attach(&mut tape, false);
        let x = tape.constant(frames.clone());
        let y = self.config.forward(&mut tape, &p, x);
        Ok(tape.value(y).clone())
    }

    pub fn discriminate(&self, frame: &Frame) -> Result<PatchScoreMap, ModelError> {
        self.discriminate_batch(&frame.to_tensor())
    }
}
