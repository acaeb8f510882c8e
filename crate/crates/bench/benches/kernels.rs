use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cstyle_bench::random_matrix;
use cstyle_core::correspondence::{build_correspondence, AnchorView};
use cstyle_core::tensor::ops::{adain, gram_matrix, multi_head_attention};
use cstyle_core::{SearchSpace, SubjectMask};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    // 16x16 grid; keys from one image or a batch of four
    for n_keys in [256, 1024] {
        let q = random_matrix(1, 256, 32);
        let k = random_matrix(2, n_keys, 32);
        let v = random_matrix(3, n_keys, 32);
        group.bench_with_input(BenchmarkId::new("heads4_d32", n_keys), &n_keys, |b, _| {
            b.iter(|| multi_head_attention(black_box(&q), black_box(&k), black_box(&v), 4).unwrap())
        });
    }
    group.finish();
}

fn statistics(c: &mut Criterion) {
    let x = random_matrix(4, 256, 64);
    let y = random_matrix(5, 256, 64);
    c.bench_function("adain_256x64", |b| {
        b.iter(|| adain(black_box(&x), black_box(&y)).unwrap())
    });
    c.bench_function("gram_256x64", |b| b.iter(|| gram_matrix(black_box(&x)).unwrap()));
}

fn correspondence(c: &mut Criterion) {
    let grid = (16, 16);
    let target = random_matrix(6, 256, 32);
    let anchors: Vec<_> = (0..2).map(|i| random_matrix(10 + i, 256, 32)).collect();
    let full: Vec<_> = (0..3).map(|i| SubjectMask::full(i, grid)).collect();
    let views: Vec<_> = anchors
        .iter()
        .enumerate()
        .map(|(i, f)| AnchorView {
            index: i,
            features: f,
            mask: &full[i],
        })
        .collect();
    c.bench_function("correspondence_2_anchors", |b| {
        b.iter(|| build_correspondence(black_box(&target), &full[2], &views, SearchSpace::SubjectPatches).unwrap())
    });
}

criterion_group!(benches, attention, statistics, correspondence);
criterion_main!(benches);
