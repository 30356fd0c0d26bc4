use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use snrl::metrics::svd_singular_values;
use snrl::specnorm::{conv_power_iter_step, power_iter_step, SpectralState};
use snrl::tensor::kernels::{conv2d, matmul, ConvGeom};
use snrl_bench::filled;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let a = filled(&[n, n], 0.1);
        let b = filled(&[n, n], 0.2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| matmul(black_box(a.data()), black_box(b.data()), n, n, n))
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    // desk batch of 32 observations through an 8-channel 3x3 layer
    let g = ConvGeom {
        batch: 32,
        in_channels: 2,
        height: 10,
        width: 10,
        out_channels: 8,
        kh: 3,
        kw: 3,
    };
    let x = filled(&[32, 2, 10, 10], 0.3);
    let k = filled(&[8, 2, 3, 3], 0.4);
    c.bench_function("conv2d/desk_batch", |b| b.iter(|| conv2d(black_box(x.data()), black_box(k.data()), &g)));
}

fn bench_power_iteration(c: &mut Criterion) {
    let w = filled(&[64, 512], 0.5);
    let state = SpectralState::with_u(0, vec![1.0 / (512f64).sqrt(); 512], 64);
    c.bench_function("power_iter_step/dense_64x512", |b| {
        b.iter(|| power_iter_step(black_box(&w), black_box(&state)).unwrap())
    });
    let k = filled(&[8, 2, 3, 3], 0.6);
    let state = SpectralState::with_u(0, vec![0.1; 200], 8 * 64);
    c.bench_function("power_iter_step/conv_8x2_on_10x10", |b| {
        b.iter(|| conv_power_iter_step(black_box(&k), &[2, 10, 10], black_box(&state)).unwrap())
    });
}

fn bench_svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("svd");
    group.sample_size(20);
    for n in [8usize, 32, 64] {
        let m = filled(&[n, n], 0.7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| svd_singular_values(black_box(&m)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_conv, bench_power_iteration, bench_svd);
criterion_main!(benches);
