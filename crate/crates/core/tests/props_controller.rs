use std::time::Duration;

use proptest::prelude::*;
use vragent_core::horizon::{controller_update, SignalSnapshot};
use vragent_core::{ControllerConfig, ControllerState, Signal};

fn signal() -> impl Strategy<Value = Signal> {
    prop::sample::select(Signal::ALL.to_vec())
}

fn config() -> impl Strategy<Value = ControllerConfig> {
    (
        signal(),
        1usize..=8,
        0usize..=24,
        0.0f64..0.5,
        0.0f64..2.0,
        0.01f64..=1.0,
        0usize..=4,
        prop::option::of(1u64..20),
        1usize..=40,
    )
        .prop_map(
            |(signal, w_min, extra, m_min, m_span, alpha, hysteresis, budget_ms, recovery)| ControllerConfig {
                w_min,
                w_max: w_min + extra,
                m_min,
                m_max: m_min + m_span,
                alpha,
                hysteresis,
                budget: budget_ms.map(Duration::from_millis),
                recovery_steps: recovery,
                ..ControllerConfig::new(signal, w_min + extra)
            },
        )
}

fn snapshot() -> impl Strategy<Value = SignalSnapshot> {
    (0.0f64..10.0, 0.0f64..2.0, 0.0f64..1.0, 0.0f64..=1.0).prop_map(|(m, e, v, c)| SignalSnapshot {
        motion_speed: m,
        prediction_entropy: e,
        action_variance: v,
        historical_consistency: c,
        step: 0,
    })
}

fn instant(signal: Signal, horizon: usize) -> ControllerConfig {
    ControllerConfig {
        alpha: 1.0,
        hysteresis: 0,
        ..ControllerConfig::new(signal, horizon)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn outputs_stay_in_bounds(
        cfg in config(),
        steps in prop::collection::vec((snapshot(), prop::option::of(0u64..40)), 1..80),
    ) {
        let mut st = ControllerState::new(&cfg);
        for (snap, lat) in steps {
            let (w, m) = controller_update(&snap, &cfg, &mut st, lat.map(Duration::from_millis));
            prop_assert!(w >= cfg.w_min && w <= cfg.w_max, "W {} outside {}..={}", w, cfg.w_min, cfg.w_max);
            prop_assert!(m >= cfg.m_min - 1e-12 && m <= cfg.m_max + 1e-12);
            let s = st.s_hat.unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn target_window_never_grows_with_the_signal(cfg in config(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cfg.target_window(lo) >= cfg.target_window(hi));
        prop_assert!(cfg.decay(lo) <= cfg.decay(hi) + 1e-15);
    }

    #[test]
    fn instant_controller_is_memoryless(
        sig in signal(),
        h in 1usize..=32,
        history in prop::collection::vec(snapshot(), 0..20),
        snap in snapshot(),
    ) {
        let cfg = instant(sig, h);
        let mut warm = ControllerState::new(&cfg);
        for s in &history {
            controller_update(s, &cfg, &mut warm, None);
        }
        let mut cold = ControllerState::new(&cfg);
        prop_assert_eq!(
            controller_update(&snap, &cfg, &mut warm, None),
            controller_update(&snap, &cfg, &mut cold, None)
        );
    }

    #[test]
    fn more_consistency_means_longer_windows(h in 1usize..=32, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let cfg = instant(Signal::Consistency, h);
        let run = |c: f64| {
            let snap = SignalSnapshot { historical_consistency: c, ..Default::default() };
            controller_update(&snap, &cfg, &mut ControllerState::new(&cfg), None).0
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(run(lo) <= run(hi));
    }

    #[test]
    fn overruns_only_shrink(cfg in config(), snaps in prop::collection::vec(snapshot(), 1..40)) {
        let cfg = ControllerConfig { budget: Some(Duration::from_millis(5)), ..cfg };
        let mut free = ControllerState::new(&cfg);
        let mut late = ControllerState::new(&cfg);
        for s in &snaps {
            let (wf, _) = controller_update(s, &cfg, &mut free, None);
            let (wl, _) = controller_update(s, &cfg, &mut late, Some(Duration::from_millis(50)));
            prop_assert!(wl <= wf);
        }
        prop_assert_eq!(late.fallback_events, snaps.len() as u64);
    }
}

#[test]
fn consistency_extremes() {
    let cfg = instant(Signal::Consistency, 16);
    let w = |c: f64| {
        let snap = SignalSnapshot {
            historical_consistency: c,
            ..Default::default()
        };
        controller_update(&snap, &cfg, &mut ControllerState::new(&cfg), None).0
    };
    assert_eq!(w(1.0), 16);
    assert_eq!(w(0.0), 1);
}
