mod common;

use common::{any_frame, raw_quat, unit_quat, vec3};
use proptest::prelude::*;
use vragent_core::action::{unflatten, CONTINUOUS_DIM};
use vragent_core::geometry::{normalize_quaternion, rotate};

fn close(a: [f64; 4], b: [f64; 4], tol: f64) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn rotation_keeps_length(q in unit_quat(), v in vec3(10.0)) {
        prop_assert!((rotate(q, v).norm() - v.norm()).abs() <= 1e-6 * v.norm().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn normalization_is_idempotent(raw in raw_quat()) {
        let once = normalize_quaternion(raw).unwrap();
        let twice = normalize_quaternion(once.components()).unwrap();
        prop_assert!(close(once.components(), twice.components(), 1e-12));
    }

    #[test]
    fn scaled_inputs_normalize_alike(raw in raw_quat(), s in 0.01f64..100.0) {
        let a = normalize_quaternion(raw).unwrap();
        let b = normalize_quaternion(raw.map(|c| c * s)).unwrap();
        prop_assert!(close(a.components(), b.components(), 1e-12));
    }

    #[test]
    fn double_cover(q in unit_quat(), v in vec3(5.0)) {
        let a = rotate(q, v);
        let b = rotate(q.neg(), v);
        prop_assert!(a.distance(b) <= 1e-12 * v.norm().max(1.0));
    }

    #[test]
    fn flatten_round_trip(f in any_frame()) {
        let flat = f.flatten();
        prop_assert_eq!(flat.continuous.len(), CONTINUOUS_DIM);
        prop_assert_eq!(flat.buttons.len(), f.num_buttons());
        prop_assert!(!flat.clamped);
        let back = unflatten(&flat.continuous, &flat.buttons).unwrap();
        prop_assert!(!back.degenerate && !back.clamped);
        prop_assert_eq!(&back.frame.buttons, &f.buttons);
        let again = back.frame.flatten();
        for (x, y) in again.continuous.iter().zip(&flat.continuous) {
            prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn button_count_leaves_continuous_layout_alone(f in any_frame(), nb in 0usize..=32) {
        let mut g = f;
        g.buttons = vragent_core::Buttons::from_mask(f.buttons.mask(), nb).unwrap();
        prop_assert_eq!(g.flatten().continuous, f.flatten().continuous);
    }
}
