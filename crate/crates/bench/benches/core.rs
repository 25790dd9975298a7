use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dive_core::benchmark::{dynamic_range, dynamics_controllability};
use dive_core::dynamics::{dynamic_score, DynamicsConfig};
use dive_core::flow::{estimate_flow, FlowParams};
use dive_core::frame_io::{synthesize_moving, Motion};
use dive_core::mca::{mca_forward, FeatureMatrix, McaParams};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn flow(c: &mut Criterion) {
    let seq = synthesize_moving(256, 256, 2, &Motion::Translate { dx: 2, dy: 1 }, 1).unwrap();
    let params = FlowParams::default();
    c.bench_function("estimate_flow 256x256", |b| {
        b.iter(|| estimate_flow(black_box(&seq.frames()[0]), black_box(&seq.frames()[1]), &params).unwrap())
    });
}

fn dynamics(c: &mut Criterion) {
    let seq = synthesize_moving(256, 256, 16, &Motion::Translate { dx: 1, dy: 0 }, 2).unwrap();
    let cfg = DynamicsConfig::default();
    c.bench_function("dynamic_score 16x256x256", |b| b.iter(|| dynamic_score(black_box(&seq), &cfg).unwrap()));
}

fn mca(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(3);
    let params = McaParams::random(64, 32, None, &mut rng);
    let f_i = FeatureMatrix::random(256, 64, &mut rng);
    let f_a = FeatureMatrix::random(32, 64, &mut rng);
    let f_t = FeatureMatrix::random(77, 32, &mut rng);
    c.bench_function("mca_forward 256/32 tokens -> 77x32", |b| {
        b.iter(|| mca_forward(black_box(&f_i), black_box(&f_a), black_box(&f_t), &params).unwrap())
    });
}

fn aggregate(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(4);
    let pairs: Vec<(u8, f64)> = (0..1000).map(|_| (rng.random_range(1..=5), rng.random::<f64>())).collect();
    let scores: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    c.bench_function("DR + DC over 1000 items", |b| {
        b.iter(|| (dynamic_range(black_box(&scores)).unwrap(), dynamics_controllability(black_box(&pairs)).unwrap()))
    });
}

criterion_group!(benches, flow, dynamics, mca, aggregate);
criterion_main!(benches);
