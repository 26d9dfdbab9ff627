// SPDX-License-Identifier: Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use latentswap_core::trainer::{batch_gradient, sample_batch};
use latentswap_core::{rng, FrozenWorld, MixerStack, Space, TrainConfig, WorldConfig};

fn setup(space: Space) -> (FrozenWorld, TrainConfig, MixerStack) {
    let world = FrozenWorld::seed(42, WorldConfig::default()).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.space = space;
    cfg.batch_size = 4;
    let stack = MixerStack::init(cfg.mixer_config(&world), 0).unwrap();
    (world, cfg, stack)
}

fn mixer_forward(c: &mut Criterion) {
    let (world, cfg, stack) = setup(Space::WPlus);
    let batch = sample_batch(&world, &cfg, &mut rng::stream(0, "bench")).unwrap();
    let (s, t) = &batch[0];
    c.bench_function("mixer_forward_wplus", |b| b.iter(|| stack.mix(black_box(s), black_box(t)).unwrap()));
}

fn generator(c: &mut Criterion) {
    let (world, cfg, _) = setup(Space::WPlus);
    let batch = sample_batch(&world, &cfg, &mut rng::stream(0, "bench")).unwrap();
    let code = &batch[0].0;
    c.bench_function("generate", |b| b.iter(|| world.generate(black_box(code)).unwrap()));
    let img = world.generate(code).unwrap();
    c.bench_function("extract_coeffs", |b| b.iter(|| world.extract_coeffs(black_box(&img)).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("batch_gradient");
    g.sample_size(10);
    for space in [Space::W, Space::WPlus] {
        let (world, cfg, stack) = setup(space);
        let batch = sample_batch(&world, &cfg, &mut rng::stream(0, "bench")).unwrap();
        g.bench_function(format!("{space}_batch4"), |b| {
            b.iter(|| batch_gradient(&world, &stack, cfg.weights, black_box(&batch), 1).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, mixer_forward, generator, train_step);
criterion_main!(benches);
