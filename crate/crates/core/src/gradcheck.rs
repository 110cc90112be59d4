//! Finite-difference verification of every training loss at 64-bit precision.
//!
//! Each suite differentiates a loss with respect to the predicted frame (or
//! the discriminator input) on small random inputs and compares against
//! central differences.

use ffad_autograd::check::{max_relative_error, numerical_gradient, DEFAULT_FLOOR, DEFAULT_STEP};
use ffad_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::{FlowEstimator, FlowEstimatorSpec};
use crate::losses;
use crate::predictor::{Discriminator, DiscriminatorConfig};

pub const THRESHOLD: f64 = 1e-3;
pub const LOSS_NAMES: [&str; 5] = ["intensity", "gradient", "flow", "adversarial_d", "adversarial_g"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Side length of the square test frames.
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Adds a term with zero value but nonzero gradient to the named loss.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            size: 8,
            channels: 3,
            seed: 0,
            corrupt: None,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-0.9..0.9)).collect()).unwrap()
}

/// `sum(x²) - detach(sum(x²))`: evaluates to exactly zero, gradient `2x`.
fn invisible_term(tape: &mut Tape<f64>, x: Var) -> Var {
    let sq = tape.square(x);
    let s = tape.sum(sq);
    let d = tape.detach(s);
    tape.sub(s, d)
}

fn check_one(name: &'static str, x: &Tensor<f64>, corrupt: bool, build: &dyn Fn(&mut Tape<f64>, Var) -> Var) -> GradcheckResult {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let mut loss = build(&mut tape, xv);
    if corrupt {
        let extra = invisible_term(&mut tape, xv);
        loss = tape.add(loss, extra);
    }
    let grads = tape.backward(loss);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numerical_gradient(x, DEFAULT_STEP, |p| {
        let mut t = Tape::new();
        let pv = t.constant(p.clone());
        let l = build(&mut t, pv);
        t.value(l).item()
    });
    GradcheckResult {
        name,
        max_rel_error: max_relative_error(&analytic, &numeric, DEFAULT_FLOOR),
        threshold: THRESHOLD,
    }
}

pub fn run_gradchecks(opts: &GradcheckOptions) -> Vec<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = [1, opts.channels, opts.size, opts.size];
    let pred = random(&shape, &mut rng);
    let gt = random(&shape, &mut rng);
    let prev = random(&shape, &mut rng);
    let real = random(&shape, &mut rng);
    let flow = FlowEstimator::from_spec(&FlowEstimatorSpec::default()).expect("default flow spec is valid");
    let d = Discriminator::new(
        DiscriminatorConfig {
            channels: opts.channels,
            base_width: 4,
            stages: 2,
        },
        opts.seed,
    )
    .expect("valid discriminator");
    let d_params = d.params.cast::<f64>();
    let corrupt = |n: &str| opts.corrupt.as_deref() == Some(n);

    let intensity = |t: &mut Tape<f64>, x: Var| {
        let g = t.constant(gt.clone());
        losses::intensity(t, x, g).unwrap()
    };
    let gradient = |t: &mut Tape<f64>, x: Var| {
        let g = t.constant(gt.clone());
        losses::gradient(t, x, g).unwrap()
    };
    let flow_loss = |t: &mut Tape<f64>, x: Var| {
        let (g, p) = (t.constant(gt.clone()), t.constant(prev.clone()));
        let fp = flow.estimate_on_tape(t, x, p);
        let fg = flow.estimate_on_tape(t, g, p);
        let fg = t.detach(fg);
        losses::flow(t, fp, fg).unwrap()
    };
    let adv_d = |t: &mut Tape<f64>, x: Var| {
        let p = d_params.attach(t, false);
        let r = t.constant(real.clone());
        let sr = d.config.forward(t, &p, r);
        let sf = d.config.forward(t, &p, x);
        losses::adversarial_d(t, sr, sf).unwrap()
    };
    let adv_g = |t: &mut Tape<f64>, x: Var| {
        let p = d_params.attach(t, false);
        let sf = d.config.forward(t, &p, x);
        losses::adversarial_g(t, sf)
    };
    vec![
        check_one("intensity", &pred, corrupt("intensity"), &intensity),
        check_one("gradient", &pred, corrupt("gradient"), &gradient),
        check_one("flow", &pred, corrupt("flow"), &flow_loss),
        check_one("adversarial_d", &pred, corrupt("adversarial_d"), &adv_d),
        check_one("adversarial_g", &pred, corrupt("adversarial_g"), &adv_g),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_losses_pass() {
        for r in run_gradchecks(&GradcheckOptions::default()) {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn corruption_is_detected_only_where_injected() {
        let opts = GradcheckOptions {
            corrupt: Some("gradient".into()),
            ..Default::default()
        };
        for r in run_gradchecks(&opts) {
            assert_eq!(r.passed(), r.name != "gradient", "{}: {}", r.name, r.max_rel_error);
        }
    }
}
