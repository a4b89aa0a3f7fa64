use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vragent_bench::{batch, bench_map, demo_dataset, full_buffer, jittered_frame};
use vragent_core::injection::{self, BenchConfig};
use vragent_core::sim::{observation_encode, rest_frame, GameState, HitRule, IdentityAgent};
use vragent_core::{ActPolicy, ChunkModel, EnsembleConfig, PolicyConfig, Signal, TrainConfig, Trainer};

fn wire(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frame = jittered_frame(&mut rng, 6);
    let bytes = injection::encode(&frame, 42);
    c.bench_function("wire/encode", |b| b.iter(|| injection::encode(black_box(&frame), 42)));
    c.bench_function("wire/decode", |b| {
        b.iter(|| injection::decode(black_box(&bytes), 6).unwrap())
    });
}

fn ensembler(c: &mut Criterion) {
    let horizon = 16;
    let buf = full_buffer(horizon, 2);
    let t = horizon as u64;
    let mut g = c.benchmark_group("ensembler/aggregate");
    for w in [1, 4, 8, 16] {
        let cfg = EnsembleConfig::new(w, 0.1);
        g.bench_with_input(BenchmarkId::from_parameter(w), &cfg, |b, cfg| {
            b.iter(|| buf.aggregate(black_box(t), cfg).unwrap())
        });
    }
    g.finish();
}

fn policy(c: &mut Criterion) {
    let p = ActPolicy::<f32>::new(PolicyConfig::default()).unwrap();
    let map = bench_map();
    let rest = rest_frame(6);
    let game = GameState::new(&map, HitRule::default(), &rest);
    let obs = observation_encode(&game, &rest, 0, 4);
    let mut g = c.benchmark_group("policy/predict");
    for len in [1, 8, 16] {
        g.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, &len| {
            b.iter(|| p.predict(black_box(&obs), len).unwrap())
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let ds = demo_dataset(10.0);
    let cfg = PolicyConfig::default();
    let samples = batch(&ds, 32, cfg.horizon);
    let mut trainer = Trainer::new(ActPolicy::<f32>::new(cfg).unwrap(), TrainConfig::default()).unwrap();
    let mut g = c.benchmark_group("training");
    g.sample_size(20);
    g.bench_function("step/batch32", |b| {
        b.iter(|| trainer.step(black_box(&samples)).unwrap())
    });
    g.finish();
}

fn simulator(c: &mut Criterion) {
    let map = bench_map();
    let rest = rest_frame(6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<_> = (0..60).map(|_| jittered_frame(&mut rng, 6)).collect();
    c.bench_function("sim/one_second_at_60hz", |b| {
        b.iter(|| {
            let mut game = GameState::new(&map, HitRule::default(), &rest);
            for f in &frames {
                game.step(f, 1.0 / 60.0);
            }
            game.good
        })
    });
}

fn pipeline(c: &mut Criterion) {
    let map = bench_map();
    let cfg = BenchConfig::new(Signal::MotionSpeed, 16, 100);
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(20);
    g.bench_function("identity/100_steps", |b| {
        b.iter(|| injection::bench(&mut IdentityAgent::new(16, 6), &map, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, wire, ensembler, policy, training, simulator, pipeline);
criterion_main!(benches);
