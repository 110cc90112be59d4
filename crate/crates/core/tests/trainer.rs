use std::cell::RefCell;
use std::rc::Rc;

use ffad_autograd::{Tape, Tensor};
use ffad_core::checkpoint::Checkpoint;
use ffad_core::flow::FlowKind;
use ffad_core::frames::{Frame, FrameSequence};
use ffad_core::losses::{self, LossBreakdown};
use ffad_core::trainer::{self, batch_tensors, Phase, TrainConfig, TrainError, TrainOutputs, Trainer};

const SIDE: usize = 16;

fn tiny(channels: usize) -> TrainConfig {
    let mut c = TrainConfig {
        resolution: SIDE,
        batch: 2,
        max_steps: 4,
        seed: 11,
        eval_every: 2,
        g_base_width: 2,
        g_depth: 2,
        d_base_width: 2,
        d_stages: 2,
        channels: Some(channels),
        ..Default::default()
    };
    c.flow.iterations = 5;
    c
}

/// A bright square drifting one pixel per frame.
fn moving_square(id: &str, channels: usize, len: usize, offset: usize) -> FrameSequence {
    let frames = (0..len)
        .map(|t| {
            let mut d = vec![-0.6f32; channels * SIDE * SIDE];
            for c in 0..channels {
                for y in 4..9 {
                    for x in 0..5 {
                        let xx = (x + t + offset) % SIDE;
                        d[c * SIDE * SIDE + y * SIDE + xx] = 0.5 + 0.1 * c as f32;
                    }
                }
            }
            Frame::new(channels, SIDE, SIDE, d).unwrap()
        })
        .collect();
    FrameSequence {
        video_id: id.into(),
        frames,
    }
}

fn dataset(channels: usize) -> Vec<FrameSequence> {
    vec![moving_square("a", channels, 12, 0), moving_square("b", channels, 9, 7)]
}

#[test]
fn zero_steps_leave_initial_parameters() {
    let cfg = TrainConfig { max_steps: 0, ..tiny(3) };
    let fresh = Trainer::new(cfg.clone(), 3).unwrap();
    let (ckpt, hist) = trainer::train(&cfg, &dataset(3), &TrainOutputs::default()).unwrap();
    assert!(hist.records.is_empty());
    assert_eq!(ckpt.to_bytes(), fresh.to_checkpoint().to_bytes());
}

#[test]
fn discriminator_updates_before_generator() {
    let mut t = Trainer::new(tiny(3), 3).unwrap();
    let events = Rc::new(RefCell::new(Vec::new()));
    let sink = events.clone();
    t.set_observer(Box::new(move |phase, state| {
        sink.borrow_mut()
            .push((phase, state.generator.params.checksum(), state.discriminator.params.checksum()));
    }));
    let data = dataset(3);
    for _ in 0..2 {
        let batch = t.sample_batch(&data).unwrap();
        t.train_step(&batch).unwrap();
    }
    let ev = events.borrow();
    let phases: Vec<Phase> = ev.iter().map(|e| e.0).collect();
    use Phase::*;
    assert_eq!(
        phases,
        [
            BeforeDiscriminator,
            AfterDiscriminator,
            BeforeGenerator,
            AfterGenerator,
            BeforeDiscriminator,
            AfterDiscriminator,
            BeforeGenerator,
            AfterGenerator
        ]
    );
    for step in ev.chunks(4) {
        // D phase touches only D, G phase touches only G
        assert_eq!(step[0].1, step[1].1);
        assert_ne!(step[0].2, step[1].2);
        assert_eq!(step[2].2, step[3].2);
        assert_ne!(step[2].1, step[3].1);
    }
}

fn d_loss(t: &Trainer, real: &Tensor<f32>, fake: &Tensor<f32>) -> f32 {
    let mut tape = Tape::<f32>::new();
    let d = &t.state.discriminator;
    let p = d.params.attach(&mut tape, false);
    let (r, f) = (tape.constant(real.clone()), tape.constant(fake.clone()));
    let sr = d.config.forward(&mut tape, &p, r);
    let sf = d.config.forward(&mut tape, &p, f);
    let l = losses::discriminator_objective(&mut tape, sr, sf).unwrap();
    tape.value(l).item()
}

#[test]
fn one_discriminator_step_descends_on_its_batch() {
    let cfg = TrainConfig {
        lr_d: Some(1e-3),
        ..tiny(3)
    };
    let mut t = Trainer::new(cfg, 3).unwrap();
    let batch = t.sample_batch(&dataset(3)).unwrap();
    let (input, target, _) = batch_tensors(&batch);
    let fake = t.state.generator.predict_batch(&input).unwrap();
    let before = d_loss(&t, &target, &fake);
    let logged = t.train_step(&batch).unwrap();
    assert!((logged.d - before as f64).abs() < 1e-6);
    assert!(d_loss(&t, &target, &fake) < before);
}

#[test]
fn same_seed_same_bytes() {
    let data = dataset(1);
    let a = trainer::train(&tiny(1), &data, &TrainOutputs::default()).unwrap().0;
    let b = trainer::train(&tiny(1), &data, &TrainOutputs::default()).unwrap().0;
    assert_eq!(a.to_bytes(), b.to_bytes());
    let other = TrainConfig { seed: 12, ..tiny(1) };
    let c = trainer::train(&other, &data, &TrainOutputs::default()).unwrap().0;
    assert_ne!(a.id(), c.id());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = dataset(3);
    let dir = tempfile::tempdir().unwrap();
    let straight = TrainConfig { max_steps: 6, ..tiny(3) };
    let (full, full_hist) = trainer::train(&straight, &data, &TrainOutputs::default()).unwrap();

    let out = TrainOutputs {
        dir: Some(dir.path().to_path_buf()),
    };
    let half = TrainConfig { max_steps: 3, ..straight.clone() };
    let (mid, _) = trainer::train(&half, &data, &out).unwrap();
    let reloaded = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(reloaded.to_bytes(), mid.to_bytes());
    let (end, _) = trainer::resume(&reloaded, Some(6), &data, &out).unwrap();

    let mut end_trainer = Trainer::from_checkpoint(&end).unwrap();
    let mut full_trainer = Trainer::from_checkpoint(&full).unwrap();
    assert_eq!(end_trainer.state, full_trainer.state);
    // the RNG continues identically too
    assert_eq!(end_trainer.sample_batch(&data).unwrap(), full_trainer.sample_batch(&data).unwrap());

    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(LossBreakdown::LOG_HEADER));
    let rows: Vec<(u64, LossBreakdown)> = lines.map(|l| LossBreakdown::parse_log_line(l).unwrap()).collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
    for ((_, a), (_, b)) in rows.iter().zip(&full_hist.records) {
        assert!((a.total_g - b.total_g).abs() <= 1e-9 * b.total_g.abs().max(1.0));
    }
    assert!(dir.path().join("step_000002.ckpt").exists());
    assert!(dir.path().join("step_000004.ckpt").exists());
}

#[test]
fn external_flow_weights_stay_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.ckpt");
    let mut net = Checkpoint::new();
    net.set("kind", "flow");
    let w0: Vec<f32> = (0..4 * 2 * 9).map(|i| ((i * 37 % 17) as f32 / 17.0 - 0.5) * 0.2).collect();
    let w1: Vec<f32> = (0..2 * 4 * 9).map(|i| ((i * 29 % 13) as f32 / 13.0 - 0.5) * 0.2).collect();
    net.push("flow.layer0.weight", Tensor::from_vec(&[4, 2, 3, 3], w0).unwrap());
    net.push("flow.layer0.bias", Tensor::from_vec(&[4], vec![0.1, 0.0, -0.1, 0.2]).unwrap());
    net.push("flow.layer1.weight", Tensor::from_vec(&[2, 4, 3, 3], w1).unwrap());
    net.push("flow.layer1.bias", Tensor::zeros(&[2]));
    net.save(&path).unwrap();

    let mut cfg = TrainConfig { max_steps: 100, ..tiny(1) };
    cfg.flow.kind = FlowKind::ExternalNetwork;
    cfg.flow.weights_path = Some(path);
    let mut t = Trainer::new(cfg, 1).unwrap();
    let before = t.flow().params().unwrap().checksum();
    let g0 = t.state.generator.params.checksum();
    trainer::run(&mut t, &dataset(1), &TrainOutputs::default()).unwrap();
    assert_eq!(t.flow().params().unwrap().checksum(), before);
    assert_ne!(t.state.generator.params.checksum(), g0);
}

#[test]
fn exploding_learning_rate_is_reported_by_term() {
    let cfg = TrainConfig {
        lr_g: Some(1e30),
        lr_d: Some(1e30),
        max_steps: 20,
        ..tiny(1)
    };
    match trainer::train(&cfg, &dataset(1), &TrainOutputs::default()) {
        Err(TrainError::NonFiniteLoss { term, dump, .. }) => {
            assert!(["int", "gd", "op", "adv_g", "total_g", "d"].contains(&term));
            assert!(dump.contains("int="), "{dump}");
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn short_videos_are_an_empty_dataset() {
    let data = vec![moving_square("x", 3, 4, 0)];
    assert!(matches!(
        trainer::train(&tiny(3), &data, &TrainOutputs::default()),
        Err(TrainError::EmptyDataset(5))
    ));
    assert!(matches!(
        trainer::train(&tiny(3), &[], &TrainOutputs::default()),
        Err(TrainError::EmptyDataset(5))
    ));
}

#[test]
fn disabled_flow_term_is_still_logged() {
    let mut cfg = tiny(3);
    cfg.weights.flow = 0.0;
    cfg.max_steps = 2;
    let (_, hist) = trainer::train(&cfg, &dataset(3), &TrainOutputs::default()).unwrap();
    for (_, b) in &hist.records {
        assert!(b.op.is_finite() && b.op >= 0.0);
        let w = cfg.weights;
        let expect = w.intensity * b.int + w.gradient * b.gd + w.adversarial * b.adv_g;
        assert!((b.total_g - expect).abs() < 1e-5 * expect.max(1.0));
    }
}

#[test]
fn mismatched_data_is_rejected() {
    assert!(matches!(
        trainer::train(&tiny(1), &dataset(3), &TrainOutputs::default()),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn generator_loads_back_from_checkpoint() {
    let (ckpt, _) = trainer::train(&tiny(3), &dataset(3), &TrainOutputs::default()).unwrap();
    let (g, cfg) = trainer::load_generator(&ckpt).unwrap();
    assert_eq!(cfg.channels, Some(3));
    assert_eq!(cfg.hash(), ckpt.get("config_hash").unwrap());
    let t = Trainer::from_checkpoint(&ckpt).unwrap();
    assert_eq!(g, t.state.generator);
}
