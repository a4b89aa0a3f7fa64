//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vragent_core::dataset::{SampleIndex, TrainingSample};
use vragent_core::policy::PolicyOutput;
use vragent_core::sim::{generate_map, record_episode, rest_frame, MapSpec, NoteMap, RunConfig};
use vragent_core::{ActionFrame, ChunkBuffer, Dataset, Vec3};

pub fn bench_map() -> NoteMap {
    generate_map(&MapSpec::new("bench", 5.35, 30.0, 3)).expect("feasible preset")
}

/// Rest frame with jittered hand positions.
pub fn jittered_frame(rng: &mut ChaCha8Rng, num_buttons: usize) -> ActionFrame {
    let mut f = rest_frame(num_buttons);
    let mut j = || {
        Vec3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
        )
    };
    f.left.position = f.left.position + j();
    f.right.position = f.right.position + j();
    f
}

/// A buffer holding one chunk per step for the `horizon` steps before
/// `horizon`, so every step has `horizon` overlapping candidates.
pub fn full_buffer(horizon: usize, seed: u64) -> ChunkBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ChunkBuffer::new(horizon + 1);
    for k in 1..=horizon as u64 {
        let frames: Vec<ActionFrame> = (0..horizon).map(|_| jittered_frame(&mut rng, 6)).collect();
        buf.push(PolicyOutput::from_frames(k, &frames)).expect("valid chunk");
    }
    buf
}

/// Oracle demonstrations on a short map.
pub fn demo_dataset(seconds: f64) -> Dataset {
    let map = generate_map(&MapSpec::new("demo", 3.27, seconds, 7)).expect("feasible map");
    let ep = record_episode(&map, 0, 0.02, 6, 1, &RunConfig::default()).expect("recording succeeds");
    Dataset::new(vec![ep], 6)
}

pub fn batch(ds: &Dataset, size: usize, horizon: usize) -> Vec<TrainingSample> {
    let n = ds.episodes[0].valid_starts(horizon);
    (0..size)
        .map(|i| {
            ds.sample(
                SampleIndex {
                    episode: 0,
                    t: i * 7 % n,
                },
                horizon,
                1,
            )
        })
        .collect()
}
