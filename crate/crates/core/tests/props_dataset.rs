mod common;

use common::random_frame;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vragent_core::action::Observation;
use vragent_core::dataset::{episode_coverage, read_dataset, write_dataset, BatchSchedule, DemoFrame};
use vragent_core::{Dataset, Episode, SamplerKind, CONTINUOUS_DIM};

fn dataset(lengths: &[usize], dim: usize, nb: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes = lengths
        .iter()
        .enumerate()
        .map(|(id, &len)| {
            let frames = (0..len)
                .map(|k| DemoFrame {
                    observation: Observation {
                        feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        device_state: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                        step: k as u64,
                    },
                    action: random_frame(&mut rng, nb),
                    timestamp_ns: k as u64 * 33_333_333 + rng.random_range(0..1000),
                })
                .collect();
            Episode::new(id as u64, frames, 30.0).unwrap()
        })
        .collect();
    Dataset::new(episodes, nb)
}

fn bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    write_dataset(ds, &mut out).unwrap();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn save_of_load_is_byte_identical(
        lengths in prop::collection::vec(1usize..30, 1..6),
        dim in 1usize..12,
        nb in 0usize..=32,
        seed in any::<u64>(),
    ) {
        let first = bytes(&dataset(&lengths, dim, nb, seed));
        let loaded = read_dataset(&first[..]).unwrap();
        prop_assert_eq!(loaded.episodes.len(), lengths.len());
        prop_assert_eq!(loaded.num_buttons, nb);
        prop_assert_eq!(loaded.episodes[0].frames[0].observation.device_state.len(), CONTINUOUS_DIM);
        prop_assert_eq!(bytes(&loaded), first);
    }

    #[test]
    fn episodic_epochs_visit_every_episode(
        lengths in prop::collection::vec(5usize..40, 1..24),
        batch in 1usize..16,
        seed in any::<u64>(),
    ) {
        let ds = dataset(&lengths, 2, 0, seed);
        let n = ds.episodes.len();
        let horizon = 4;
        let episodic = BatchSchedule { kind: SamplerKind::Episodic, seed, horizon, batch_size: batch };
        let random = BatchSchedule { kind: SamplerKind::FullyRandom, ..episodic.clone() };
        // Whole batches until at least one epoch of draws.
        let batches = n.div_ceil(batch) as u64;
        let draw = |s: &BatchSchedule| (0..batches).flat_map(|k| s.batch(&ds, k)).collect::<Vec<_>>();
        let e = draw(&episodic);
        let r = draw(&random);
        prop_assert_eq!(episode_coverage(&ds, &e), 1.0);
        prop_assert!(episode_coverage(&ds, &r) <= 1.0);
        for v in e.iter().chain(&r) {
            prop_assert!(v.t < ds.episodes[v.episode].valid_starts(horizon));
        }
    }
}

#[test]
fn random_sampling_usually_misses_episodes() {
    let ds = dataset(&[20; 8], 2, 0, 1);
    let mut short = 0;
    for seed in 0..200 {
        let s = BatchSchedule {
            kind: SamplerKind::FullyRandom,
            seed,
            horizon: 4,
            batch_size: 8,
        };
        if episode_coverage(&ds, &s.batch(&ds, 0)) < 1.0 {
            short += 1;
        }
        let e = BatchSchedule {
            kind: SamplerKind::Episodic,
            ..s
        };
        assert_eq!(episode_coverage(&ds, &e.batch(&ds, 0)), 1.0);
    }
    assert!(
        short >= 190,
        "random sampling covered all 8 episodes in {} of 200 epochs",
        200 - short
    );
}
