use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use cstyle_core::pipeline::{phase1_vanilla, phase2_correspondence, Session};
use cstyle_core::RunConfig;

fn session(steps: usize) -> Session {
    let overrides = [format!("steps={steps}"), "batch_size=4".to_string()];
    Session::new(RunConfig::from_text("", &overrides).unwrap()).unwrap()
}

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("sampling");
    group.sample_size(10);
    let s = session(20);
    group.bench_function("vanilla_b4_n20", |b| b.iter(|| phase1_vanilla(black_box(&s)).unwrap()));
    group.bench_function("correspondence_b4_n20", |b| {
        b.iter(|| phase2_correspondence(black_box(&s)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, sampling);
criterion_main!(benches);
