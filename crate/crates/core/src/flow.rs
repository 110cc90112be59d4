//! Frozen, differentiable optical-flow estimators.
//!
//! The default estimator is a fixed-iteration Horn–Schunck scheme built from
//! tape operations, so gradients reach both input frames while the estimator
//! itself has nothing to train. A convolutional network stored in a
//! checkpoint can be used instead; its weights enter the tape as constants.
//!
//! `estimate(a, b)` returns the motion that carries `a` onto `b`: if `b` is
//! `a` shifted one pixel right, `u` is about `+1`.

use std::path::{Path, PathBuf};

use ffad_autograd::{Scalar, Tape, Tensor, Var};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::frames::Frame;
use crate::predictor::ParamSet;

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const DX: [f64; 9] = [0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0];
const DY: [f64; 9] = [0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0];
const NEIGHBOUR_MEAN: [f64; 9] = [
    1.0 / 12.0,
    1.0 / 6.0,
    1.0 / 12.0,
    1.0 / 6.0,
    0.0,
    1.0 / 6.0,
    1.0 / 12.0,
    1.0 / 6.0,
    1.0 / 12.0,
];

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("flow network weights not found: {0}")]
    WeightsNotFound(String),
    #[error("invalid flow network: {0}")]
    InvalidNetwork(String),
    #[error("frame shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("invalid flow spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    SurrogateHs,
    ExternalNetwork,
}

impl FlowKind {
    pub fn name(self) -> &'static str {
        match self {
            FlowKind::SurrogateHs => "surrogate_hs",
            FlowKind::ExternalNetwork => "external_network",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "surrogate_hs" => Some(FlowKind::SurrogateHs),
            "external_network" => Some(FlowKind::ExternalNetwork),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEstimatorSpec {
    pub kind: FlowKind,
    pub iterations: usize,
    pub smoothness: f64,
    pub weights_path: Option<PathBuf>,
}

impl Default for FlowEstimatorSpec {
    fn default() -> Self {
        Self {
            kind: FlowKind::SurrogateHs,
            iterations: 50,
            smoothness: 1.0,
            weights_path: None,
        }
    }
}

impl FlowEstimatorSpec {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.iterations == 0 {
            return Err(FlowError::InvalidSpec("iterations must be at least 1".into()));
        }
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return Err(FlowError::InvalidSpec(format!("smoothness {} must be positive", self.smoothness)));
        }
        Ok(())
    }
}

/// Per-pixel displacement `[1, 2, H, W]`: channel 0 is `u` (right), 1 is `v` (down).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub uv: Tensor<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            uv: Tensor::zeros(&[1, 2, h, w]),
        }
    }

    pub fn uniform(h: usize, w: usize, u: f32, v: f32) -> Self {
        let mut data = vec![u; h * w];
        data.extend(std::iter::repeat_n(v, h * w));
        Self {
            uv: Tensor::from_vec(&[1, 2, h, w], data).unwrap(),
        }
    }

    pub fn height(&self) -> usize {
        self.uv.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.uv.shape()[3]
    }

    pub fn u(&self) -> &[f32] {
        &self.uv.data()[..self.height() * self.width()]
    }

    pub fn v(&self) -> &[f32] {
        &self.uv.data()[self.height() * self.width()..]
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u().iter().zip(self.v()).map(|(u, v)| (u * u + v * v).sqrt()).fold(0.0, f32::max)
    }
}

/// Sequential 3x3 convolution stack taking `[luma(a), luma(b)]` to `(u, v)`,
/// ReLU between layers; stored as `flow.layer<i>.weight|bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalFlowNet {
    params: ParamSet<f32>,
}

impl ExternalFlowNet {
    pub fn from_params(params: ParamSet<f32>) -> Result<Self, FlowError> {
        let bad = |m: String| Err(FlowError::InvalidNetwork(m));
        if params.is_empty() || params.len() % 2 != 0 {
            return bad(format!("{} tensors; expected weight/bias pairs", params.len()));
        }
        let mut cin = 2;
        for (i, pair) in params.tensors().chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let expect = [format!("layer{i}.weight"), format!("layer{i}.bias")];
            if params.names()[2 * i..2 * i + 2] != expect {
                return bad(format!("layer {i} is named {:?}", &params.names()[2 * i..2 * i + 2]));
            }
            match w.shape() {
                [co, ci, 3, 3] if *ci == cin && b.shape() == [*co] => cin = *co,
                s => return bad(format!("layer {i} weight {s:?} does not take {cin} channels with a 3x3 kernel")),
            }
        }
        if cin != 2 {
            return bad(format!("final layer emits {cin} channels, expected 2"));
        }
        Ok(Self { params })
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        if !path.is_file() {
            return Err(FlowError::WeightsNotFound(path.display().to_string()));
        }
        let ckpt = Checkpoint::load(path)?;
        let params = ckpt.params_with_prefix("flow");
        if params.is_empty() {
            return Err(FlowError::WeightsNotFound(format!("{} holds no flow.* tensors", path.display())));
        }
        Self::from_params(params)
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, la: Var, lb: Var) -> Var {
        let p = self.params.cast::<T>().attach(tape, false);
        let mut h = tape.concat_channels(&[la, lb]);
        let layers = p.len() / 2;
        for (i, pair) in p.chunks(2).enumerate() {
            h = tape.conv2d(h, pair[0], Some(pair[1]), 1, 1);
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowEstimator {
    Surrogate { iterations: usize, smoothness: f64 },
    External(ExternalFlowNet),
}

impl FlowEstimator {
    pub fn from_spec(spec: &FlowEstimatorSpec) -> Result<Self, FlowError> {
        match spec.kind {
            FlowKind::SurrogateHs => {
                spec.validate()?;
                Ok(FlowEstimator::Surrogate {
                    iterations: spec.iterations,
                    smoothness: spec.smoothness,
                })
            }
            FlowKind::ExternalNetwork => {
                let path = spec
                    .weights_path
                    .as_ref()
                    .ok_or_else(|| FlowError::WeightsNotFound("no weights path given".into()))?;
                Ok(FlowEstimator::External(ExternalFlowNet::load(path)?))
            }
        }
    }

    /// Frozen parameters, if the estimator has any.
    pub fn params(&self) -> Option<&ParamSet<f32>> {
        match self {
            FlowEstimator::Surrogate { .. } => None,
            FlowEstimator::External(net) => Some(net.params()),
        }
    }

    /// `a, b: [N, C, H, W]` in `[-1, 1]` to flow `[N, 2, H, W]`.
    pub fn estimate_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, a: Var, b: Var) -> Var {
        assert_eq!(tape.shape(a), tape.shape(b), "flow inputs must share a shape");
        match self {
            FlowEstimator::Surrogate { iterations, smoothness } => {
                let la = brightness(tape, a, 127.5);
                let lb = brightness(tape, b, 127.5);
                horn_schunck(tape, la, lb, *iterations, *smoothness)
            }
            FlowEstimator::External(net) => {
                let la = brightness(tape, a, 1.0);
                let lb = brightness(tape, b, 1.0);
                net.forward(tape, la, lb)
            }
        }
    }

    pub fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField, FlowError> {
        if a.dims() != b.dims() {
            return Err(FlowError::ShapeMismatch(a.dims(), b.dims()));
        }
        let mut tape = Tape::<f32>::new();
        let av = tape.constant(a.to_tensor());
        let bv = tape.constant(b.to_tensor());
        let uv = self.estimate_on_tape(&mut tape, av, bv);
        Ok(FlowField { uv: tape.value(uv).clone() })
    }
}

pub fn estimate_flow(spec: &FlowEstimatorSpec, a: &Frame, b: &Frame) -> Result<FlowField, FlowError> {
    FlowEstimator::from_spec(spec)?.estimate(a, b)
}

/// Luma of `[-1, 1]` frames rescaled to `[-scale, scale]` and shifted to start at 0
/// when `scale` is 127.5, i.e. the usual 8-bit brightness range.
fn brightness<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: f64) -> Var {
    let c = tape.shape(x)[1];
    let luma = if c == 3 {
        tape.channel_mix(x, &LUMA.map(T::of))
    } else {
        assert_eq!(c, 1, "flow expects 1 or 3 channels");
        x
    };
    let scaled = tape.scale(luma, T::of(scale));
    if scale == 1.0 {
        scaled
    } else {
        tape.add_scalar(scaled, T::of(scale))
    }
}

/// Jacobi relaxation of the Horn–Schunck energy from zero flow. Derivatives
/// are central differences of the frame average with replicated borders.
fn horn_schunck<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, iterations: usize, alpha: f64) -> Var {
    let k = |s: [f64; 9]| s.map(T::of);
    let sum = tape.add(a, b);
    let mean = tape.scale(sum, T::of(0.5));
    let ix = tape.stencil3x3(mean, k(DX));
    let iy = tape.stencil3x3(mean, k(DY));
    let it = tape.sub(b, a);
    let ix2 = tape.square(ix);
    let iy2 = tape.square(iy);
    let grad2 = tape.add(ix2, iy2);
    let denom = tape.add_scalar(grad2, T::of(alpha * alpha));
    let zeros = tape.constant(Tensor::zeros(tape.shape(a)));
    let (mut u, mut v) = (zeros, zeros);
    for i in 0..iterations {
        let (ub, vb) = if i == 0 {
            (zeros, zeros)
        } else {
            (tape.stencil3x3(u, k(NEIGHBOUR_MEAN)), tape.stencil3x3(v, k(NEIGHBOUR_MEAN)))
        };
        let xu = tape.mul(ix, ub);
        let yv = tape.mul(iy, vb);
        let s = tape.add(xu, yv);
        let num = tape.add(s, it);
        let q = tape.div(num, denom);
        let du = tape.mul(ix, q);
        let dv = tape.mul(iy, q);
        u = tape.sub(ub, du);
        v = tape.sub(vb, dv);
    }
    tape.concat_channels(&[u, v])
}

/// Bilinear backward warp: `out(p) = frame(p + flow(p))`, sample positions clamped to the border.
pub fn warp(frame: &Frame, flow: &FlowField) -> Frame {
    let (c, h, w) = frame.dims();
    assert_eq!((flow.height(), flow.width()), (h, w), "flow and frame sizes differ");
    let src = frame.data();
    let (u, v) = (flow.u(), flow.v());
    let mut out = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + u[i] as f64).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + v[i] as f64).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = &src[ch * h * w..];
                let top = p[y0 * w + x0] as f64 * (1.0 - fx) + p[y0 * w + x1] as f64 * fx;
                let bottom = p[y1 * w + x0] as f64 * (1.0 - fx) + p[y1 * w + x1] as f64 * fx;
                out[ch * h * w + i] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Frame::new(c, h, w, out).expect("convex combination stays in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_give_zero_flow() {
        let data: Vec<f32> = (0..3 * 12 * 12).map(|i| ((i * 37 % 101) as f32 / 101.0) * 2.0 - 1.0).collect();
        let a = Frame::new(3, 12, 12, data).unwrap();
        let f = estimate_flow(&FlowEstimatorSpec::default(), &a, &a).unwrap();
        assert!(f.max_magnitude() < 1e-6);
    }

    #[test]
    fn constant_images_give_zero_flow() {
        let a = Frame::filled(1, 8, 8, -0.5).unwrap();
        let b = Frame::filled(1, 8, 8, 0.25).unwrap();
        let f = estimate_flow(&FlowEstimatorSpec::default(), &a, &b).unwrap();
        assert!(f.max_magnitude() < 1e-6);
    }

    #[test]
    fn missing_external_weights() {
        let spec = FlowEstimatorSpec {
            kind: FlowKind::ExternalNetwork,
            weights_path: Some("/nonexistent/flow.ckpt".into()),
            ..Default::default()
        };
        assert!(matches!(FlowEstimator::from_spec(&spec), Err(FlowError::WeightsNotFound(_))));
        let spec = FlowEstimatorSpec {
            kind: FlowKind::ExternalNetwork,
            ..Default::default()
        };
        assert!(matches!(FlowEstimator::from_spec(&spec), Err(FlowError::WeightsNotFound(_))));
    }

    #[test]
    fn invalid_spec() {
        let spec = FlowEstimatorSpec {
            iterations: 0,
            ..Default::default()
        };
        assert!(FlowEstimator::from_spec(&spec).is_err());
        let spec = FlowEstimatorSpec {
            smoothness: 0.0,
            ..Default::default()
        };
        assert!(FlowEstimator::from_spec(&spec).is_err());
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let a = Frame::new(1, 2, 3, vec![0.1, 0.2, 0.3, -0.4, -0.5, 0.6]).unwrap();
        assert_eq!(warp(&a, &FlowField::zeros(2, 3)), a);
    }
}
