use ffad_autograd::check::{max_relative_error, numerical_gradient, DEFAULT_FLOOR, DEFAULT_STEP};
use ffad_autograd::{Axis, Tape, Tensor, Var};
use proptest::prelude::*;

fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Checks d f / d x for a graph `build(tape, x)` returning a scalar.
fn check(x: Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&mut tape, xv);
    let grads = tape.backward(loss);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numerical_gradient(&x, DEFAULT_STEP, |p| {
        let mut t = Tape::new();
        let pv = t.constant(p.clone());
        let l = build(&mut t, pv);
        t.value(l).item()
    });
    max_relative_error(&analytic, &numeric, DEFAULT_FLOOR)
}

fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let w = tape.constant(pseudo(tape.shape(v), seed));
    let p = tape.mul(v, w);
    tape.sum(p)
}

#[test]
fn pointwise_ops() {
    let x = pseudo(&[2, 2, 3, 3], 1);
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, Var) -> Var>)> = vec![
        ("square", Box::new(|t, x| {
            let y = t.square(x);
            weighted_sum(t, y, 9)
        })),
        ("abs", Box::new(|t, x| {
            let y = t.abs(x);
            weighted_sum(t, y, 9)
        })),
        ("tanh", Box::new(|t, x| {
            let y = t.tanh(x);
            weighted_sum(t, y, 9)
        })),
        ("sigmoid", Box::new(|t, x| {
            let y = t.sigmoid(x);
            weighted_sum(t, y, 9)
        })),
        ("relu", Box::new(|t, x| {
            let y = t.relu(x);
            weighted_sum(t, y, 9)
        })),
        ("leaky", Box::new(|t, x| {
            let y = t.leaky_relu(x, 0.2);
            weighted_sum(t, y, 9)
        })),
        ("mul-div", Box::new(|t, x| {
            let y = t.mul(x, x);
            let d = t.add_scalar(y, 1.5);
            let q = t.div(x, d);
            let s = t.scale(q, 3.0);
            let m = t.sub(s, x);
            t.mean(m)
        })),
    ];
    for (name, f) in cases {
        let err = check(x.clone(), f);
        assert!(err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn convolution_ops() {
    let x = pseudo(&[2, 3, 6, 6], 2);
    let w = pseudo(&[4, 3, 3, 3], 3);
    let b = pseudo(&[4], 4);
    let wt = pseudo(&[3, 2, 3, 3], 5);
    let e1 = check(x.clone(), |t, x| {
        let wv = t.constant(w.clone());
        let bv = t.constant(b.clone());
        let y = t.conv2d(x, wv, Some(bv), 1, 1);
        weighted_sum(t, y, 6)
    });
    let e2 = check(w.clone(), |t, wv| {
        let xv = t.constant(x.clone());
        let y = t.conv2d(xv, wv, None, 2, 1);
        weighted_sum(t, y, 7)
    });
    let e3 = check(x.clone(), |t, x| {
        let wv = t.constant(wt.clone());
        let y = t.conv_transpose2d(x, wv, None, 2, 1, 1);
        weighted_sum(t, y, 8)
    });
    let e4 = check(wt.clone(), |t, wv| {
        let xv = t.constant(x.clone());
        let bv = t.leaf(pseudo(&[2], 1));
        let y = t.conv_transpose2d(xv, wv, Some(bv), 2, 1, 1);
        weighted_sum(t, y, 8)
    });
    let e5 = check(b.clone(), |t, bv| {
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let y = t.conv2d(xv, wv, Some(bv), 1, 1);
        weighted_sum(t, y, 6)
    });
    for (name, e) in [("conv dx", e1), ("conv dw", e2), ("deconv dx", e3), ("deconv dw", e4), ("conv db", e5)] {
        assert!(e < 1e-5, "{name}: {e}");
    }
}

#[test]
fn structural_ops() {
    let x = pseudo(&[2, 2, 4, 6], 11);
    let errs = [
        check(x.clone(), |t, x| {
            let y = t.max_pool2x2(x);
            weighted_sum(t, y, 1)
        }),
        check(x.clone(), |t, x| {
            let sq = t.square(x);
            let y = t.concat_channels(&[x, sq, x]);
            weighted_sum(t, y, 2)
        }),
        check(x.clone(), |t, x| {
            let a = t.diff(x, Axis::Width);
            let b = t.diff(x, Axis::Height);
            let sa = weighted_sum(t, a, 3);
            let sb = weighted_sum(t, b, 4);
            t.add(sa, sb)
        }),
        check(x.clone(), |t, x| {
            let k = [0.1, 0.2, 0.05, -0.3, 0.4, 0.0, 0.25, -0.1, 0.7];
            let y = t.stencil3x3(x, k);
            weighted_sum(t, y, 5)
        }),
        check(x.clone(), |t, x| {
            let y = t.channel_mix(x, &[0.3, -0.7]);
            weighted_sum(t, y, 6)
        }),
    ];
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < 1e-5, "case {i}: {e}");
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(pseudo(&[1, 1, 2, 2], 1));
    let x = tape.leaf(pseudo(&[1, 1, 2, 2], 2));
    let y = tape.mul(c, x);
    let l = tape.sum(y);
    let grads = tape.backward(l);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), tape.value(c).data());
}

#[test]
fn detached_branch_changes_value_not_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(pseudo(&[1, 1, 2, 2], 3));
    let d = tape.detach(x);
    let y = tape.mul(d, x);
    let l = tape.sum(y);
    let grads = tape.backward(l);
    assert_eq!(grads.get(x).unwrap().data(), tape.value(x).data());
}

proptest! {
    #[test]
    fn stencil_is_adjoint_consistent(seed in 0u64..1000, h in 1usize..6, w in 1usize..6) {
        // <S x, y> == <x, S^T y> with S^T realised by the tape's backward pass.
        let x = pseudo(&[1, 1, h, w], seed);
        let y = pseudo(&[1, 1, h, w], seed + 1);
        let k = [0.3, -0.1, 0.2, 0.5, 1.0, -0.4, 0.0, 0.6, 0.1];
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let s = tape.stencil3x3(xv, k);
        let yv = tape.constant(y.clone());
        let p = tape.mul(s, yv);
        let l = tape.sum(p);
        let lhs = tape.value(l).item();
        let grads = tape.backward(l);
        let rhs: f64 = grads.get(xv).unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}
