//! Training objectives. Every loss is a mean over its terms, so magnitudes do
//! not depend on resolution.
//!
//! Tape-level builders (generic over precision) are used for training and
//! gradient checks; the value-level functions evaluate the same graphs at
//! 64-bit precision.

use ffad_autograd::{Axis, Scalar, Tape, Tensor, Var};

use crate::flow::FlowField;
use crate::frames::Frame;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("frame of {0}x{1} is too small for image gradients")]
    TooSmall(usize, usize),
    #[error("loss weight {name} = {value} is negative")]
    NegativeWeight { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub intensity: f64,
    pub gradient: f64,
    pub flow: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            intensity: 1.0,
            gradient: 1.0,
            flow: 2.0,
            adversarial: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in self.named() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }

    /// `(name, weight)` in objective order: int, gd, op, adv.
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("int", self.intensity),
            ("gd", self.gradient),
            ("op", self.flow),
            ("adv", self.adversarial),
        ]
    }

    /// Variant name listing the enabled terms, e.g. `int+gd+adv`.
    pub fn variant_name(&self) -> String {
        let on: Vec<&str> = self.named().iter().filter(|(_, w)| *w > 0.0).map(|(n, _)| *n).collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub int: f64,
    pub gd: f64,
    pub op: f64,
    pub adv_g: f64,
    pub total_g: f64,
    pub d: f64,
}

impl LossBreakdown {
    pub const LOG_HEADER: &'static str = "step,int,gd,op,adv_g,total_g,d";

    pub fn log_line(&self, step: u64) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.int, self.gd, self.op, self.adv_g, self.total_g, self.d
        )
    }

    pub fn parse_log_line(line: &str) -> Option<(u64, Self)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        let v = |i: usize| f[i].parse::<f64>().ok();
        Some((
            f[0].parse().ok()?,
            Self {
                int: v(1)?,
                gd: v(2)?,
                op: v(3)?,
                adv_g: v(4)?,
                total_g: v(5)?,
                d: v(6)?,
            },
        ))
    }

    /// `(name, value)` of each generator component.
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("int", self.int),
            ("gd", self.gd),
            ("op", self.op),
            ("adv_g", self.adv_g),
            ("total_g", self.total_g),
            ("d", self.d),
        ]
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<(), LossError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(LossError::ShapeMismatch(tape.shape(a).to_vec(), tape.shape(b).to_vec()));
    }
    Ok(())
}

/// Mean squared difference.
pub fn intensity<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var, LossError> {
    same_shape(tape, pred, gt)?;
    let d = tape.sub(pred, gt);
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean over all horizontal and vertical neighbour pairs of `| |dpred| - |dgt| |`.
pub fn gradient<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var, LossError> {
    same_shape(tape, pred, gt)?;
    let s = tape.shape(pred);
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < 2 || w < 2 {
        return Err(LossError::TooSmall(h, w));
    }
    let mut sums = Vec::with_capacity(2);
    let mut count = 0;
    for axis in [Axis::Width, Axis::Height] {
        let dp = tape.diff(pred, axis);
        let dg = tape.diff(gt, axis);
        let ap = tape.abs(dp);
        let ag = tape.abs(dg);
        let gap = tape.sub(ap, ag);
        let term = tape.abs(gap);
        count += tape.value(term).numel();
        sums.push(tape.sum(term));
    }
    let total = tape.add(sums[0], sums[1]);
    Ok(tape.scale(total, T::of(1.0 / count as f64)))
}

/// Mean absolute difference over both flow components.
pub fn flow<T: Scalar>(tape: &mut Tape<T>, flow_pred: Var, flow_gt: Var) -> Result<Var, LossError> {
    same_shape(tape, flow_pred, flow_gt)?;
    let d = tape.sub(flow_pred, flow_gt);
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// `mean ½(D(I) - 1)² + mean ½D(Î)²`.
pub fn adversarial_d<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var, LossError> {
    same_shape(tape, real, fake)?;
    let r = tape.add_scalar(real, T::of(-1.0));
    let r2 = tape.square(r);
    let rm = tape.mean(r2);
    let f2 = tape.square(fake);
    let fm = tape.mean(f2);
    let s = tape.add(rm, fm);
    Ok(tape.scale(s, T::of(0.5)))
}

/// `mean ½(D(Î) - 1)²`.
pub fn adversarial_g<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Var {
    let f = tape.add_scalar(fake, T::of(-1.0));
    let f2 = tape.square(f);
    let m = tape.mean(f2);
    tape.scale(m, T::of(0.5))
}

/// Component losses of one generator evaluation, in objective order.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub int: Var,
    pub gd: Var,
    pub op: Var,
    pub adv: Var,
}

/// Weighted sum of the enabled terms; zero-weight terms are left out of the
/// graph entirely.
pub fn generator_objective<T: Scalar>(tape: &mut Tape<T>, terms: &GeneratorTerms, w: &LossWeights) -> Result<Var, LossError> {
    w.validate()?;
    let parts = [terms.int, terms.gd, terms.op, terms.adv];
    let mut total: Option<Var> = None;
    for (v, (_, weight)) in parts.into_iter().zip(w.named()) {
        if weight == 0.0 {
            continue;
        }
        let scaled = tape.scale(v, T::of(weight));
        total = Some(match total {
            Some(t) => tape.add(t, scaled),
            None => scaled,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// The discriminator minimizes exactly the adversarial discriminator loss.
pub fn discriminator_objective<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var, LossError> {
    adversarial_d(tape, real, fake)
}

/// Scalar form of [`generator_objective`] over `(int, gd, op, adv_g)`.
pub fn combine(components: [f64; 4], w: &LossWeights) -> Result<f64, LossError> {
    w.validate()?;
    let mut total: Option<f64> = None;
    for (v, (_, weight)) in components.into_iter().zip(w.named()) {
        if weight == 0.0 {
            continue;
        }
        total = Some(total.map_or(weight * v, |t| t + weight * v));
    }
    Ok(total.unwrap_or(0.0))
}

fn eval_pair(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    f: impl FnOnce(&mut Tape<f64>, Var, Var) -> Result<Var, LossError>,
) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let av = tape.constant(a.cast());
    let bv = tape.constant(b.cast());
    let l = f(&mut tape, av, bv)?;
    Ok(tape.value(l).item())
}

pub fn intensity_loss(pred: &Frame, gt: &Frame) -> Result<f64, LossError> {
    eval_pair(&pred.to_tensor(), &gt.to_tensor(), intensity)
}

pub fn gradient_loss(pred: &Frame, gt: &Frame) -> Result<f64, LossError> {
    eval_pair(&pred.to_tensor(), &gt.to_tensor(), gradient)
}

pub fn flow_loss(flow_pred: &FlowField, flow_gt: &FlowField) -> Result<f64, LossError> {
    eval_pair(&flow_pred.uv, &flow_gt.uv, flow)
}

pub fn adversarial_loss_d(real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<f64, LossError> {
    eval_pair(real, fake, adversarial_d)
}

pub fn adversarial_loss_g(fake: &Tensor<f32>) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(fake.cast::<f64>());
    let l = adversarial_g(&mut tape, v);
    tape.value(l).item()
}

pub fn discriminator_loss(real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<f64, LossError> {
    adversarial_loss_d(real, fake)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_weight_is_rejected() {
        let w = LossWeights { flow: -1.0, ..Default::default() };
        assert_eq!(combine([0.0; 4], &w), Err(LossError::NegativeWeight { name: "op", value: -1.0 }));
    }

    #[test]
    fn variant_names() {
        assert_eq!(LossWeights::default().variant_name(), "int+gd+op+adv");
        let w = LossWeights { flow: 0.0, ..Default::default() };
        assert_eq!(w.variant_name(), "int+gd+adv");
    }

    #[test]
    fn log_line_round_trips() {
        let b = LossBreakdown {
            int: 0.1,
            gd: 0.2,
            op: 0.3,
            adv_g: 0.4,
            total_g: 0.5,
            d: 0.6,
        };
        let (step, back) = LossBreakdown::parse_log_line(&b.log_line(17)).unwrap();
        assert_eq!(step, 17);
        for ((_, x), (_, y)) in b.components().iter().zip(back.components()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Frame::filled(1, 2, 2, 0.0).unwrap();
        let b = Frame::filled(1, 2, 3, 0.0).unwrap();
        assert!(matches!(intensity_loss(&a, &b), Err(LossError::ShapeMismatch(..))));
        let c = Frame::filled(1, 1, 3, 0.0).unwrap();
        assert_eq!(gradient_loss(&c, &c), Err(LossError::TooSmall(1, 3)));
    }
}
