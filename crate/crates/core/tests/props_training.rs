use proptest::prelude::*;
use vragent_core::action::Observation;
use vragent_core::policy::LatentDist;
use vragent_core::training::{bool_loss, continuous_l1, kl_divergence, LossBreakdown, BOOL_WEIGHT};
use vragent_core::{ActPolicy, ChunkModel, PolicyConfig, CONTINUOUS_DIM};

fn small_config(seed: u64) -> PolicyConfig {
    PolicyConfig {
        width: 16,
        heads: 2,
        ffn_hidden: 32,
        enc_layers: 1,
        dec_layers: 1,
        horizon: 4,
        latent_dim: 4,
        seed,
        ..PolicyConfig::default()
    }
}

fn observation(feature: Vec<f64>) -> Observation {
    Observation {
        feature,
        device_state: [0.0; CONTINUOUS_DIM],
        step: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn breakdown_adds_up(l1 in 0.0f64..10.0, lb in 0.0f64..10.0, kl in 0.0f64..10.0, lambda in 0.0f64..20.0) {
        let b = LossBreakdown::new(l1, lb, kl, lambda);
        prop_assert!((b.total - (b.l1_cont + BOOL_WEIGHT * b.l_bool + lambda * b.kl)).abs() <= 1e-9);
    }

    #[test]
    fn kl_is_never_negative(dist in (1usize..16).prop_flat_map(|n| (
        prop::collection::vec(-5.0f64..5.0, n),
        prop::collection::vec(-15.0f64..15.0, n),
    ))) {
        let (mu, logvar) = dist;
        let kl = kl_divergence(&LatentDist { mu, logvar });
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn component_losses_are_never_negative(pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.0f64..=1.0, any::<bool>()), 1..64)) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let probs: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| f64::from(u8::from(p.3))).collect();
        prop_assert!(continuous_l1(&pred, &target).unwrap() >= 0.0);
        prop_assert!(bool_loss(&probs, &ys).unwrap() >= 0.0);
        prop_assert_eq!(continuous_l1(&pred, &pred).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prediction_is_a_pure_function(seed in any::<u64>(), feature in prop::collection::vec(-1.0f64..1.0, 30), len in 1usize..=4) {
        let a = ActPolicy::<f64>::new(small_config(seed)).unwrap();
        let b = ActPolicy::<f64>::new(small_config(seed)).unwrap();
        let obs = observation(feature);
        let first = a.predict(&obs, len).unwrap();
        prop_assert_eq!(&first, &a.predict(&obs, len).unwrap());
        prop_assert_eq!(&first, &b.predict(&obs, len).unwrap());
        prop_assert_eq!(first.len(), len);
    }

    #[test]
    fn blob_round_trip_preserves_predictions(seed in any::<u64>(), feature in prop::collection::vec(-1.0f64..1.0, 30)) {
        let p = ActPolicy::<f32>::new(small_config(seed)).unwrap();
        let q = ActPolicy::<f32>::from_blob(&p.to_blob()).unwrap();
        let obs = observation(feature);
        prop_assert_eq!(p.predict(&obs, 4).unwrap(), q.predict(&obs, 4).unwrap());
        prop_assert_eq!(p.to_blob(), q.to_blob());
    }
}
