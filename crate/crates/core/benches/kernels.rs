//! Single-thread vs pooled comparisons of the hot kernels and a full
//! generator forward pass. Build with `--no-default-features` to measure the
//! sequential fallback instead.

use std::hint::black_box;

use cgan_seg::kernels::{conv2d_backward, conv2d_forward, conv_transpose2d_forward, ConvGeom};
use cgan_seg::networks::{generator_forward, init_generator, ForwardMode, GeneratorConfig};
use cgan_seg::par;
use cgan_seg::tensor::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const BATCH: usize = 4;

fn filled(len: usize, salt: u32) -> Vec<f32> {
    (0..len as u32)
        .map(|i| (i.wrapping_mul(2654435761).wrapping_add(salt) % 2001) as f32 / 1000.0 - 1.0)
        .collect()
}

fn thread_counts() -> Vec<usize> {
    let all = par::num_threads();
    if all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn conv(c: &mut Criterion) {
    // 16 -> 32 channels, 64x64 -> 32x32, k4 s2 p1
    let g = ConvGeom::new(16, 64, 64, 4, 2, 1).unwrap();
    let co = 32;
    let x = filled(BATCH * g.in_len(), 1);
    let w = filled(co * g.col_rows(), 2);
    let b = filled(co, 3);
    let dy = filled(BATCH * co * g.col_cols(), 4);

    let mut group = c.benchmark_group("conv2d");
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::new("forward", t), &t, |bn, &t| {
            par::with_threads(t, || bn.iter(|| black_box(conv2d_forward(&g, BATCH, &x, &w, &b, co))))
        });
        group.bench_with_input(BenchmarkId::new("backward", t), &t, |bn, &t| {
            par::with_threads(t, || {
                bn.iter(|| black_box(conv2d_backward(&g, BATCH, &x, &w, &dy, co, true, true)))
            })
        });
    }
    group.finish();
}

fn conv_transpose(c: &mut Criterion) {
    // 32 -> 16 channels, 32x32 -> 64x64
    let g = ConvGeom::new(16, 64, 64, 4, 2, 1).unwrap();
    let ci = 32;
    let x = filled(BATCH * ci * g.col_cols(), 5);
    let w = filled(ci * g.col_rows(), 6);
    let b = filled(16, 7);

    let mut group = c.benchmark_group("conv_transpose2d");
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::new("forward", t), &t, |bn, &t| {
            par::with_threads(t, || bn.iter(|| black_box(conv_transpose2d_forward(&g, BATCH, &x, &w, &b, ci))))
        });
    }
    group.finish();
}

fn generator(c: &mut Criterion) {
    let cfg = GeneratorConfig {
        levels: 6,
        ..GeneratorConfig::with_filters(8)
    };
    let params = init_generator::<f32>(&cfg, 0);
    let x = Tensor::new(vec![BATCH, 3, 64, 64], filled(BATCH * 3 * 64 * 64, 8)).unwrap();

    let mut group = c.benchmark_group("generator_forward");
    group.sample_size(20);
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::new("f8_64px", t), &t, |bn, &t| {
            par::with_threads(t, || {
                bn.iter(|| black_box(generator_forward(&params, &cfg, &x, ForwardMode::Inference).unwrap()))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, conv_transpose, generator);
criterion_main!(benches);
