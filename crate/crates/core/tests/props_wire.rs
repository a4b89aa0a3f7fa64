mod common;

use std::time::Duration;

use common::any_frame;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vragent_core::injection::{decode, encode, stream, validate_stream, FRAME_SIZE};
use vragent_core::policy::PolicyOutput;
use vragent_core::{ChunkBuffer, EnsembleConfig, CONTINUOUS_DIM, DEFAULT_BUTTONS};

fn raw_chunk(rng: &mut ChaCha8Rng, start_step: u64, horizon: usize) -> PolicyOutput {
    PolicyOutput {
        start_step,
        continuous: (0..horizon)
            .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
            .collect(),
        bool_logits: (0..horizon)
            .map(|_| (0..DEFAULT_BUTTONS).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn wire_round_trip(frame in any_frame(), ts in any::<u64>()) {
        let nb = frame.buttons.len();
        let bytes = encode(&frame, ts);
        let (back, t) = decode(&bytes, nb).unwrap();
        prop_assert_eq!(t, ts);
        prop_assert_eq!(&back.buttons, &frame.buttons);
        prop_assert_eq!(encode(&back, ts), bytes);
        let (a, b) = (frame.flatten().continuous, back.flatten().continuous);
        for i in 0..CONTINUOUS_DIM {
            prop_assert!((a[i] - b[i]).abs() <= 1e-6 * a[i].abs().max(1.0), "slot {}", i);
        }
    }

    #[test]
    fn blended_output_is_a_valid_stream(
        seed in any::<u64>(),
        horizon in 1usize..=16,
        window in 1usize..=16,
        decay in 0.0..2.0f64,
        steps in 1u64..60,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ChunkBuffer::new(16);
        let cfg = EnsembleConfig::new(window, decay);
        let mut out = Vec::new();
        for t in 0..steps {
            buf.push(raw_chunk(&mut rng, t, horizon)).unwrap();
            let agg = buf.aggregate(t, &cfg).unwrap();
            out.extend_from_slice(&encode(&agg.frame, t * 16_666_667));
        }
        let report = validate_stream(&out[..]);
        prop_assert_eq!(report.frames, steps);
        prop_assert!(report.is_clean(), "{:?}", report);
    }
}

#[test]
fn pacer_duration_matches_frame_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (n, rate) in [(30usize, 60.0), (90, 120.0), (10, 20.0)] {
        let frames: Vec<_> = (0..n)
            .map(|_| common::random_frame(&mut rng, DEFAULT_BUTTONS))
            .collect();
        let mut sink = Vec::new();
        let stats = stream(frames, rate, &mut sink).unwrap();
        let period = Duration::from_secs_f64(1.0 / rate);
        let nominal = Duration::from_secs_f64(n as f64 / rate);
        let drift = stats.duration.abs_diff(nominal);
        assert_eq!(sink.len(), n * FRAME_SIZE);
        assert!(drift <= period, "{n} frames at {rate} Hz took {:?}", stats.duration);
        assert!(validate_stream(&sink[..]).is_clean());
    }
}
