use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use nowcast_bench::{bench_model_config, random_frames};
use nowcast_core::model::init_model;

fn forward(c: &mut Criterion) {
    let model = init_model::<f32>(&bench_model_config()).unwrap();
    let x = random_frames([1, 13, 64, 64], 0);
    let mut g = c.benchmark_group("model");
    g.sample_size(20);
    g.bench_function("forward_b1_64x64", |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    let x8 = random_frames([8, 13, 64, 64], 1);
    let mut train = model.clone();
    g.bench_function("train_step_b8_64x64", |b| {
        b.iter(|| {
            let (y, cache) = train.forward_train(black_box(&x8)).unwrap();
            let dy = y.clone();
            train.params_mut().zero_grad();
            train.backward(cache, &dy);
        })
    });
    g.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
