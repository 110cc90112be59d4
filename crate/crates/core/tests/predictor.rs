use ffad_autograd::check::{max_relative_error, numerical_gradient};
use ffad_autograd::{Tape, Tensor};
use ffad_core::frames::Frame;
use ffad_core::predictor::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Independent closed form of the U-Net parameter count.
fn unet_count(t: usize, c: usize, base: usize, depth: usize) -> usize {
    let w = |l: usize| base * (1 << l);
    let mut total = 0;
    let mut cin = t * c;
    for l in 0..depth {
        total += 9 * cin * w(l) + w(l) + 9 * w(l) * w(l) + w(l);
        cin = w(l);
    }
    for l in 0..depth - 1 {
        total += 9 * w(l + 1) * w(l) + w(l);
        total += 9 * 2 * w(l) * w(l) + w(l) + 9 * w(l) * w(l) + w(l);
    }
    total + 9 * w(0) * c + c
}

#[test]
fn parameter_count_closed_form_depth_one() {
    for (t, c) in [(4, 3), (4, 1), (1, 1)] {
        let cfg = GeneratorConfig {
            input_frames: t,
            channels_per_frame: c,
            base_width: 1,
            depth: 1,
        };
        let g = Generator::new(cfg, 0).unwrap();
        // conv tC->1, conv 1->1, head 1->C
        assert_eq!(g.count_parameters(), (9 * t * c + 1) + (9 + 1) + (9 * c + c));
    }
}

#[test]
fn parameter_count_matches_formula_and_grows_with_width() {
    for depth in 1..=4 {
        for base in [1, 2, 8] {
            let cfg = GeneratorConfig {
                input_frames: 4,
                channels_per_frame: 3,
                base_width: base,
                depth,
            };
            let a = Generator::new(cfg, 1).unwrap().count_parameters();
            assert_eq!(a, Generator::new(cfg, 2).unwrap().count_parameters());
            assert_eq!(a, unet_count(4, 3, base, depth));
            let wide = GeneratorConfig { base_width: 2 * base, ..cfg };
            assert!(Generator::new(wide, 1).unwrap().count_parameters() > a);
        }
    }
    let d = Discriminator::new(DiscriminatorConfig::default(), 0).unwrap();
    let expected = (16 * 3 * 64 + 64) + (16 * 64 * 128 + 128) + (16 * 128 * 256 + 256) + (16 * 256 * 512 + 512) + (9 * 512 + 1);
    assert_eq!(d.count_parameters(), expected);
}

#[test]
fn full_size_shapes() {
    let g = Generator::new(GeneratorConfig::default(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let history: Vec<Frame> = (0..4)
        .map(|_| Frame::new(3, 256, 256, (0..3 * 256 * 256).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap())
        .collect();
    let out = g.predict_next(&history).unwrap();
    assert_eq!(out.dims(), (3, 256, 256));
    let d = Discriminator::new(DiscriminatorConfig::default(), 5).unwrap();
    let map = d.discriminate(&out).unwrap();
    assert_eq!(map.shape(), &[1, 1, 16, 16]);
    assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn outputs_stay_in_range_and_are_deterministic() {
    let cfg = GeneratorConfig {
        input_frames: 4,
        channels_per_frame: 3,
        base_width: 4,
        depth: 3,
    };
    let g = Generator::new(cfg, 11).unwrap();
    let d = Discriminator::new(
        DiscriminatorConfig {
            channels: 3,
            base_width: 4,
            stages: 2,
        },
        11,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        // large-magnitude inputs push activations into saturation
        let x = random_tensor(&[1, 12, 16, 16], &mut rng, 50.0).cast::<f32>();
        let y = g.predict_batch(&x).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(y, g.predict_batch(&x).unwrap());
        let s = d.discriminate_batch(&y).unwrap();
        assert_eq!(s.shape(), &[1, 1, 4, 4]);
        assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s, d.discriminate_batch(&y).unwrap());
    }
}

#[test]
fn patch_grid_follows_receptive_field_arithmetic() {
    // each k4 s2 p1 stage maps n -> floor((n + 2 - 4) / 2) + 1
    for stages in 1..=4 {
        for side in [32usize, 64, 128] {
            let cfg = DiscriminatorConfig {
                channels: 1,
                base_width: 2,
                stages,
            };
            let d = Discriminator::new(cfg, 0).unwrap();
            let f = Frame::filled(1, side, side, 0.1).unwrap();
            let map = d.discriminate(&f).unwrap();
            let expected = side >> stages;
            assert_eq!(map.shape(), &[1, 1, expected, expected]);
            assert_eq!(cfg.grid_size(side), expected);
        }
    }
}

#[test]
fn generator_gradients_match_finite_differences() {
    let cfg = GeneratorConfig {
        input_frames: 2,
        channels_per_frame: 1,
        base_width: 2,
        depth: 2,
    };
    let g = Generator::new(cfg, 21).unwrap();
    let mut params = g.params.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // zero biases leave ReLUs fed by all-zero patches exactly on their kink
    let bias_idx: Vec<usize> = params.names().iter().enumerate().filter(|(_, n)| n.ends_with("bias")).map(|(i, _)| i).collect();
    for i in bias_idx {
        let shape = params.tensors()[i].shape().to_vec();
        params.tensors_mut()[i] = random_tensor(&shape, &mut rng, 0.1);
    }
    let x = random_tensor(&[1, 2, 16, 16], &mut rng, 1.0);
    let weights = random_tensor(&[1, 1, 16, 16], &mut rng, 1.0);
    let loss = |tape: &mut Tape<f64>, out| {
        let w = tape.constant(weights.clone());
        let p = tape.mul(out, w);
        tape.sum(p)
    };

    let mut tape = Tape::new();
    let pv = params.attach(&mut tape, true);
    let xv = tape.leaf(x.clone());
    let out = cfg.forward(&mut tape, &pv, xv);
    let l = loss(&mut tape, out);
    let grads = tape.backward(l);

    for (i, (name, p)) in params.iter().enumerate() {
        let numeric = numerical_gradient(p, 1e-6, |probe| {
            let mut t = Tape::new();
            let mut vars = params.attach(&mut t, false);
            vars[i] = t.constant(probe.clone());
            let xv = t.constant(x.clone());
            let o = cfg.forward(&mut t, &vars, xv);
            let l = loss(&mut t, o);
            t.value(l).item()
        });
        let err = max_relative_error(grads.get(pv[i]).unwrap(), &numeric, 1e-6);
        assert!(err < 1e-3, "{name}: {err}");
    }
    let numeric = numerical_gradient(&x, 1e-6, |probe| {
        let mut t = Tape::new();
        let vars = params.attach(&mut t, false);
        let xv = t.constant(probe.clone());
        let o = cfg.forward(&mut t, &vars, xv);
        let l = loss(&mut t, o);
        t.value(l).item()
    });
    let err = max_relative_error(grads.get(xv).unwrap(), &numeric, 1e-6);
    assert!(err < 1e-3, "input: {err}");
}
