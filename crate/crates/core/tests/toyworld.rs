use ffad_core::toyworld::{
    generate_test_set, generate_training_set, render_scene, simulate, write_dataset, AgentKind, AgentScript, AgentSpec, Heading, Sprite, ToyScenario,
    WorldState,
};
use proptest::prelude::*;

/// Visibility oracle: renders only the anomalous sprites on a black canvas and
/// checks whether any pixel was painted.
fn oracle_labels(states: &[WorldState]) -> Vec<u8> {
    states
        .iter()
        .map(|st| {
            let n = st.canvas_size;
            let mut painted = false;
            for s in st.sprites.iter().filter(|s| s.kind != AgentKind::Pedestrian) {
                for row in 0..n {
                    for col in 0..n {
                        let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
                        if cx >= s.x0 && cx < s.x0 + s.w && cy >= s.y0 && cy < s.y0 + s.h {
                            painted = true;
                        }
                    }
                }
            }
            painted as u8
        })
        .collect()
}

fn vehicle_only(start: usize, heading: Heading, duration: usize) -> ToyScenario {
    let mut s = ToyScenario::default_test(0);
    s.duration = duration;
    s.agents = vec![AgentScript::transit(AgentSpec::vehicle(), start, heading)];
    s
}

#[test]
fn training_set_is_deterministic_per_seed() {
    let a = generate_training_set(&ToyScenario::default_training(7)).unwrap();
    let b = generate_training_set(&ToyScenario::default_training(7)).unwrap();
    let c = generate_training_set(&ToyScenario::default_training(8)).unwrap();
    assert_eq!(a.len(), 210);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn static_pedestrian_gives_identical_frames() {
    let mut s = ToyScenario::default_training(3);
    s.agents[0].spec.speed = 0.0;
    s.duration = 20;
    let seq = generate_training_set(&s).unwrap();
    assert!(seq.frames.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn labels_match_visibility_oracle_on_default_test() {
    let s = ToyScenario::default_test(21);
    let states = simulate(&s).unwrap();
    let (seq, labels) = generate_test_set(&s).unwrap();
    assert_eq!(seq.len(), 1242);
    assert_eq!(labels.labels, oracle_labels(&states));
}

#[test]
fn vehicle_episode_labels_are_contiguous() {
    let s = vehicle_only(100, Heading::East, 220);
    let (_, labels) = generate_test_set(&s).unwrap();
    let (start, end) = s.active_span(0);
    assert_eq!(start, 100);
    for (t, &l) in labels.labels.iter().enumerate() {
        assert_eq!(l, ((100..=end).contains(&t)) as u8, "frame {t}");
    }
    // (256 + 40 - 0.5) / 6 - 0.5 = 48.75 -> 49 visible frames
    assert_eq!(end, 148);
}

#[test]
fn vehicle_crosses_whole_canvas_in_every_direction() {
    for h in Heading::ALL {
        let s = vehicle_only(5, h, 80);
        let states = simulate(&s).unwrap();
        let (start, end) = s.active_span(0);
        let seen: Vec<bool> = states.iter().map(|st| st.has_anomaly()).collect();
        assert!(seen[start] && seen[end] && !seen[start - 1] && !seen[end + 1], "{h:?}");
        assert_eq!(oracle_labels(&states), seen.iter().map(|&b| b as u8).collect::<Vec<_>>());
    }
}

#[test]
fn background_is_pure() {
    let st = WorldState::empty(64, 8);
    let a = render_scene(&st);
    assert_eq!(a, render_scene(&st));
    // corners are field, the centre is road
    assert_ne!(a.pixels[..3], a.pixels[(32 * 64 + 32) * 3..][..3]);
}

#[test]
fn pedestrian_footprint_matches_pixel_diff() {
    let bg = WorldState::empty(64, 8);
    let mut one = bg.clone();
    let color = [1, 2, 3];
    one.sprites.push(Sprite {
        script: 0,
        instance: 0,
        kind: AgentKind::Pedestrian,
        x0: 28.0,
        y0: 10.0,
        w: 8.0,
        h: 8.0,
        color,
    });
    let (a, b) = (render_scene(&bg), render_scene(&one));
    let mut changed = Vec::new();
    for row in 0..64 {
        for col in 0..64 {
            let i = (row * 64 + col) * 3;
            if a.pixels[i..i + 3] != b.pixels[i..i + 3] {
                assert_eq!(b.pixels[i..i + 3], color);
                changed.push((row, col));
            }
        }
    }
    assert_eq!(changed.len(), 64);
    assert!(changed.iter().all(|&(r, c)| (10..18).contains(&r) && (28..36).contains(&c)));
}

#[test]
fn later_sprite_wins_on_overlap() {
    let mut st = WorldState::empty(32, 8);
    for (i, color) in [[9, 9, 9], [200, 0, 0]].into_iter().enumerate() {
        st.sprites.push(Sprite {
            script: i,
            instance: 0,
            kind: AgentKind::Pedestrian,
            x0: 4.0,
            y0: 4.0,
            w: 8.0,
            h: 8.0,
            color,
        });
    }
    let f = render_scene(&st);
    assert_eq!(f.pixels[(6 * 32 + 6) * 3..][..3], [200, 0, 0]);
}

#[test]
fn dataset_layout_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = ToyScenario::default_training(1);
    train.duration = 6;
    let mut test = vehicle_only(1, Heading::East, 60);
    test.agents.insert(0, AgentScript::walker(AgentSpec::pedestrian(), Heading::North));
    write_dataset(dir.path(), &train, &test).unwrap();
    assert_eq!(std::fs::read_dir(dir.path().join("training/01")).unwrap().count(), 6);
    assert_eq!(std::fs::read_dir(dir.path().join("testing/01")).unwrap().count(), 60);
    let labels = ffad_core::frames::load_labels(&dir.path().join("labels/01.txt")).unwrap();
    assert_eq!(labels.len(), 60);
    let manifest = std::fs::read_to_string(dir.path().join("scenario.txt")).unwrap();
    assert!(manifest.contains("seed=1") && manifest.contains("kind:vehicle"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn determinism_and_continuity(seed in 0u64..10_000) {
        let mut s = ToyScenario::default_test(seed);
        s.duration = 400;
        s.agents.truncate(3);
        let a = simulate(&s).unwrap();
        prop_assert_eq!(&a, &simulate(&s).unwrap());
        for w in a.windows(2) {
            for p in w[1].sprites.iter().filter(|p| p.kind == AgentKind::Pedestrian) {
                if let Some(q) = w[0].sprites.iter().find(|q| q.script == p.script && q.instance == p.instance) {
                    let (dx, dy) = (p.x0 - q.x0, p.y0 - q.y0);
                    prop_assert!((dx * dx + dy * dy).sqrt() <= s.agents[p.script].spec.speed + 1e-9);
                }
            }
        }
        prop_assert_eq!(
            a.iter().map(|st| st.has_anomaly() as u8).collect::<Vec<_>>(),
            oracle_labels(&a)
        );
    }

    #[test]
    fn fighters_stay_within_jitter(seed in 0u64..10_000) {
        let s = {
            let mut s = ToyScenario::default_test(seed);
            s.duration = 340;
            s.agents = vec![s.agents[2].clone()];
            s
        };
        let (ax, ay) = s.agents[0].anchor.unwrap();
        for st in simulate(&s).unwrap().iter().filter(|st| !st.sprites.is_empty()) {
            prop_assert_eq!(st.sprites.len(), 2);
            for p in &st.sprites {
                let (cx, cy) = p.centre();
                prop_assert!((cx - ax).abs() <= 3.0 + 2.0 + 1e-9 && (cy - ay).abs() <= 2.0 + 1e-9);
            }
        }
    }
}
