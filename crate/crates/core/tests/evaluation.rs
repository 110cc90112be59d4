use ffad_autograd::Tensor;
use ffad_core::frames::{Frame, FrameSequence, LabelSeries};
use ffad_core::evaluator::{
    ablation_csv, ablation_table, evaluate_checkpoint, frame_auc, roc_curve, run_ablation, score_gap, trapezoid_area, AblationGrid,
    EvalOptions,
};
use ffad_core::losses::LossWeights;
use ffad_core::predictor::{Generator, GeneratorConfig, ParamSet};
use ffad_core::scorer::{normalize_scores, psnr, score_video};
use ffad_core::trainer::{self, TrainConfig, TrainOutputs};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise count: abnormal frame ranked above normal frame scores 1, ties 1/2.
fn brute_force_auc(s: &[f64], l: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] == 1 && l[j] == 0 {
                pairs += 1.0;
                let (ai, aj) = (1.0 - s[i], 1.0 - s[j]);
                num += if ai > aj {
                    1.0
                } else if ai == aj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=50);
    // a coarse grid forces ties
    let levels = rng.random_range(2..=20);
    let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let mut l: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    l[0] = 0;
    l[1] = 1;
    if rng.random_bool(0.3) {
        s[1] = s[0];
    }
    (s, l)
}

#[test]
fn auc_matches_pairwise_oracle_and_roc_integral() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let (s, l) = random_instance(&mut rng);
        let auc = frame_auc(&s, &l).unwrap();
        assert!((auc - brute_force_auc(&s, &l)).abs() <= 1e-12);
        let roc = roc_curve(&s, &l).unwrap();
        assert!((trapezoid_area(&roc) - auc).abs() <= 1e-12);
        assert!(roc.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        assert_eq!((roc.last().unwrap().fpr, roc.last().unwrap().tpr), (1.0, 1.0));
    }
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(prop_oneof![Just(0.5), 0.0f64..1.0], n),
            proptest::collection::vec(0u8..2, n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = 0;
                l[1] = 1;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_transforms((s, l) in instance()) {
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x + 1.0).powi(3)).collect();
        prop_assert_eq!(frame_auc(&s, &l).unwrap(), frame_auc(&t, &l).unwrap());
    }

    #[test]
    fn flipped_labels_complement((s, l) in instance()) {
        let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
        let sum = frame_auc(&s, &l).unwrap() + frame_auc(&s, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gap_ignores_frame_order((s, l) in instance(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let ps: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let pl: Vec<u8> = idx.iter().map(|&i| l[i]).collect();
        prop_assert!((score_gap(&s, &l).unwrap() - score_gap(&ps, &pl).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn psnr_decreases_with_error(base in -0.5f32..0.5, a in 0.001f32..0.2, b in 0.001f32..0.2) {
        prop_assume!((a - b).abs() > 1e-3);
        let gt = Frame::filled(1, 4, 4, base).unwrap();
        let pa = psnr(&gt, &Frame::filled(1, 4, 4, base + a).unwrap()).unwrap();
        let pb = psnr(&gt, &Frame::filled(1, 4, 4, base + b).unwrap()).unwrap();
        prop_assert_eq!(a < b, pa > pb);
    }

    #[test]
    fn normalization_preserves_order(p in proptest::collection::vec(-20.0f64..60.0, 2..30)) {
        let s = normalize_scores(&p).unwrap();
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread = p.iter().copied().fold(f64::NEG_INFINITY, f64::max) - p.iter().copied().fold(f64::INFINITY, f64::min);
        if spread >= 1e-9 {
            prop_assert_eq!((lo, hi), (0.0, 1.0));
        }
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p[i] < p[j] {
                    prop_assert!(s[i] <= s[j]);
                }
            }
        }
    }
}

/// A generator whose parameters are all zero predicts mid-gray (0) for any input.
fn gray_predictor(t: usize) -> Generator {
    let cfg = GeneratorConfig {
        input_frames: t,
        channels_per_frame: 1,
        base_width: 2,
        depth: 2,
    };
    let g = Generator::new(cfg, 0).unwrap();
    let zeros: Vec<Tensor<f32>> = g.params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
    Generator::from_params(cfg, ParamSet::new(g.params.names().to_vec(), zeros)).unwrap()
}

fn labeled_video(labels: &[u8]) -> FrameSequence {
    FrameSequence {
        video_id: "v".into(),
        frames: labels.iter().map(|&l| Frame::filled(1, 8, 8, if l == 1 { 0.8 } else { 0.0 }).unwrap()).collect(),
    }
}

#[test]
fn scores_align_with_labels_after_offset() {
    let t = 4;
    let labels: Vec<u8> = vec![1, 1, 0, 0, 0, 0, 1, 0, 0, 1, 1, 0];
    let g = gray_predictor(t);
    let s = score_video(&g, &labeled_video(&labels)).unwrap();
    assert_eq!(s.frame_offset, t);
    assert_eq!(s.len(), labels.len() - t);
    for (i, &score) in s.s.iter().enumerate() {
        assert_eq!(score, if labels[i + t] == 1 { 0.0 } else { 1.0 }, "frame {}", i + t);
    }
}

#[test]
fn series_lengths() {
    let g = gray_predictor(4);
    let one = score_video(&g, &labeled_video(&[0; 5])).unwrap();
    assert_eq!(one.s, vec![1.0]);
    assert_eq!(score_video(&g, &labeled_video(&[0; 7])).unwrap().len(), 3);
    assert!(score_video(&g, &labeled_video(&[0; 4])).is_err());
}

fn drifting(id: &str, len: usize, anomaly: std::ops::Range<usize>) -> (FrameSequence, LabelSeries) {
    let side = 16;
    let mut labels = vec![0u8; len];
    let frames = (0..len)
        .map(|t| {
            let mut d = vec![-0.5f32; side * side];
            for y in 5..10 {
                for x in 0..4 {
                    d[y * side + (x + t) % side] = 0.6;
                }
            }
            if anomaly.contains(&t) {
                labels[t] = 1;
                for v in d.iter_mut().skip(side * 12).take(side * 3) {
                    *v = 0.9;
                }
            }
            Frame::new(1, side, side, d).unwrap()
        })
        .collect();
    (
        FrameSequence {
            video_id: id.into(),
            frames,
        },
        LabelSeries {
            video_id: id.into(),
            labels,
        },
    )
}

fn tiny() -> TrainConfig {
    let mut c = TrainConfig {
        resolution: 16,
        batch: 2,
        max_steps: 3,
        seed: 5,
        eval_every: 0,
        g_base_width: 2,
        g_depth: 2,
        d_base_width: 2,
        d_stages: 2,
        ..Default::default()
    };
    c.flow.iterations = 4;
    c
}

#[test]
fn checkpoint_evaluation_end_to_end() {
    let (train, _) = drifting("train", 12, 0..0);
    let (test, labels) = drifting("01", 14, 8..11);
    let (ckpt, _) = trainer::train(&tiny(), &[train], &TrainOutputs::default()).unwrap();
    let opts = EvalOptions {
        flow: Some(tiny().flow),
        label: None,
    };
    let r = evaluate_checkpoint(&ckpt, &[test.clone()], &[labels.clone()], &opts).unwrap();
    assert!((0.0..=1.0).contains(&r.auc));
    assert_eq!(r.per_video[0].1.labels, labels.labels[4..].to_vec());
    assert_eq!(r.checkpoint_id, ckpt.id());
    assert!(r.flow_mse.unwrap() >= 0.0);
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path()).unwrap();
    assert!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("AUC="));
    assert!(dir.path().join("scores_01.csv").exists());

    let wrong = LabelSeries {
        video_id: "01".into(),
        labels: vec![0; 13],
    };
    let err = evaluate_checkpoint(&ckpt, &[test], &[wrong], &opts).unwrap_err().to_string();
    assert!(err.contains("14") && err.contains("13"), "{err}");
}

#[test]
fn ablation_bookkeeping() {
    let (train, _) = drifting("train", 12, 0..0);
    let (test, labels) = drifting("01", 14, 8..11);
    let base = tiny();
    let opts = EvalOptions::default();

    let single = AblationGrid::single("full", base.weights);
    let via_grid = run_ablation(&single, &base, &[train.clone()], &[test.clone()], &[labels.clone()], None, &opts).unwrap();
    let (ckpt, _) = trainer::train(&base, &[train.clone()], &TrainOutputs::default()).unwrap();
    let direct = evaluate_checkpoint(&ckpt, &[test.clone()], &[labels.clone()], &opts).unwrap();
    assert_eq!(via_grid.len(), 1);
    assert_eq!((via_grid[0].auc, via_grid[0].checkpoint_id.as_str()), (direct.auc, direct.checkpoint_id.as_str()));

    let dir = tempfile::tempdir().unwrap();
    let grid = AblationGrid::standard(LossWeights::default());
    let reports = run_ablation(&grid, &base, &[train], &[test], &[labels], Some(dir.path()), &opts).unwrap();
    assert_eq!(reports.len(), 4);
    let mut hashes: Vec<&str> = reports.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), 4);
    let table = ablation_table(&reports);
    for name in ["int ", "int+gd ", "int+gd+adv ", "int+gd+adv+op "] {
        assert!(table.lines().any(|l| l.starts_with(name)), "{table}");
    }
    assert_eq!(ablation_csv(&reports).lines().count(), 5);
    assert!(dir.path().join("int+gd").join("final.ckpt").exists());
}
