use super::*;
use crate::policy::{ActPolicy, PolicyConfig};

fn cfg(repeats: usize) -> RunConfig {
    RunConfig {
        repeats,
        ..RunConfig::default()
    }
}

#[test]
fn clean_oracle_clears_every_preset() {
    for spec in preset_maps(30.0, 11) {
        let map = generate_map(&spec).unwrap();
        let mut agent = OracleAgent::new(0.0, 16, 6);
        let r = run_closed_loop(&mut agent, &map, &Mode::NoSw, &cfg(1), 0).unwrap();
        assert!(r.report.accuracy >= 99.0, "{}: {:?}", spec.id, r.report);
        assert_eq!(replay_log(r.report.total_notes, &r.log), r.report);
    }
    let map = generate_map(&MapSpec::new("easy", 3.27, 30.0, 2)).unwrap();
    let r = run_closed_loop(&mut OracleAgent::new(0.0, 16, 6), &map, &Mode::NoSw, &cfg(1), 0).unwrap();
    assert_eq!(r.report.max_combo, r.report.total_notes);
}

#[test]
fn heavy_noise_fails() {
    let map = generate_map(&MapSpec::new("n", 3.27, 30.0, 4)).unwrap();
    let mut agent = OracleAgent::new(0.3, 16, 6);
    let r = run_closed_loop(&mut agent, &map, &Mode::NoSw, &cfg(1), 1).unwrap();
    assert!(r.report.accuracy < 50.0, "{:?}", r.report);
}

#[test]
fn identity_scores_zero() {
    let map = generate_map(&MapSpec::new("i", 5.35, 20.0, 4)).unwrap();
    let r = run_closed_loop(&mut IdentityAgent::new(16, 6), &map, &Mode::NoSw, &cfg(1), 0).unwrap();
    assert_eq!((r.report.good_hits, r.report.max_combo), (0, 0));
}

#[test]
fn random_policy_floor() {
    let map = generate_map(&MapSpec::new("r", 3.27, 20.0, 5)).unwrap();
    let model = ActPolicy::<f32>::new(PolicyConfig::default()).unwrap();
    let mut agent = ModelAgent::new(&model, "random");
    let mode = Mode::FixedSw { window: 4, decay: 0.1 };
    let r = run_closed_loop(&mut agent, &map, &mode, &cfg(1), 0).unwrap();
    assert!(r.report.accuracy <= 5.0, "{:?}", r.report);
}

#[test]
fn physics_rate_robustness() {
    for spec in preset_maps(30.0, 21) {
        let map = generate_map(&spec).unwrap();
        let at = |hz: f64| {
            let c = RunConfig {
                physics_hz: hz,
                ..cfg(1)
            };
            run_closed_loop(&mut OracleAgent::new(0.0, 16, 6), &map, &Mode::NoSw, &c, 0)
                .unwrap()
                .report
                .accuracy
        };
        assert!((at(60.0) - at(120.0)).abs() <= 2.0, "{}", spec.id);
    }
    let bad = RunConfig {
        physics_hz: 45.0,
        ..cfg(1)
    };
    assert!(bad.substeps().is_err());
}

#[test]
fn repeats_are_deterministic() {
    let map = generate_map(&MapSpec::new("d", 5.35, 15.0, 6)).unwrap();
    let mode = Mode::adaptive(crate::horizon::Signal::MotionSpeed, 16);
    let mut a = NoisyOracleAgent::new(0.2, 0.01, 16, 6);
    let r1 = run_repeated(&mut a, &map, &mode, &cfg(3)).unwrap();
    let r2 = run_repeated(&mut a, &map, &mode, &cfg(3)).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.runs.len(), 3);
    let t1 = run_closed_loop(&mut a, &map, &mode, &cfg(1), 9).unwrap();
    let t2 = run_closed_loop(&mut a, &map, &mode, &cfg(1), 9).unwrap();
    assert_eq!(t1.trace, t2.trace);
    assert!(t1.trace.iter().all(|r| (1..=16).contains(&r.window)));
}

#[test]
fn demos_are_reproducible_and_consistent() {
    let map = generate_map(&MapSpec::new("rec", 3.27, 10.0, 7)).unwrap();
    let a = record_episode(&map, 0, 0.02, 6, 3, &cfg(1)).unwrap();
    let b = record_episode(&map, 0, 0.02, 6, 3, &cfg(1)).unwrap();
    assert_eq!(a, b);
    let c = record_episode(&map, 0, 0.02, 6, 4, &cfg(1)).unwrap();
    assert_ne!(a, c);
    assert!(a
        .frames
        .iter()
        .all(|f| f.observation.feature.len() == DEFAULT_FEATURE_DIM));
    // Each observation's device state is the previous action.
    for w in a.frames.windows(2) {
        assert_eq!(w[1].observation.device_state, w[0].action.flatten().continuous);
    }
}
