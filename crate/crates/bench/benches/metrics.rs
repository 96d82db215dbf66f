use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use nowcast_bench::random_raw;
use nowcast_core::metrics::{contingency, csi_mean, ssim};
use nowcast_core::radar_data::SEVIR_THRESHOLDS;

fn metrics(c: &mut Criterion) {
    let pred = random_raw((12, 384, 384), 0);
    let gt = random_raw((12, 384, 384), 1);
    let mut g = c.benchmark_group("metrics");
    for pool in [1, 4, 16] {
        g.bench_function(format!("contingency_12x384x384_pool{pool}"), |b| {
            b.iter(|| contingency(black_box(pred.view()), black_box(gt.view()), 133.0, pool).unwrap())
        });
    }
    g.bench_function("csi_mean_sevir_thresholds", |b| {
        b.iter(|| csi_mean(black_box(pred.view()), black_box(gt.view()), &SEVIR_THRESHOLDS, 1).unwrap())
    });
    let a = pred.index_axis(ndarray::Axis(0), 0).mapv(|v| f32::from(v) / 255.0);
    let bb = gt.index_axis(ndarray::Axis(0), 0).mapv(|v| f32::from(v) / 255.0);
    g.bench_function("ssim_384x384", |b| b.iter(|| ssim(black_box(a.view()), black_box(bb.view())).unwrap()));
    g.finish();
}

criterion_group!(benches, metrics);
criterion_main!(benches);
