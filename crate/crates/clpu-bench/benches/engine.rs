//! Timings for the kernels that dominate an experiment run: gradient and
//! loss evaluation on a minibatch, audit distribution extraction, divergence
//! scoring, and stream derivation.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use clpu_bench::{batch, ce_spec, fixture};
use clpu_core::labels;
use clpu_core::nn::{grad, jsd, loss_value};
use clpu_core::protocol::output_distributions;
use clpu_core::rng::derive_stream;

fn bench_grad(c: &mut Criterion) {
    let fx = fixture();
    let b = batch(&fx.task, 32);
    let spec = ce_spec();
    c.bench_function("grad_batch32", |bencher| {
        bencher.iter(|| grad(black_box(&fx.params), black_box(&b), black_box(&spec)).unwrap())
    });
}

fn bench_loss(c: &mut Criterion) {
    let fx = fixture();
    let b = batch(&fx.task, 32);
    let spec = ce_spec();
    c.bench_function("loss_batch32", |bencher| {
        bencher.iter(|| loss_value(black_box(&fx.params), black_box(&b), black_box(&spec)).unwrap())
    });
}

fn bench_audit_distributions(c: &mut Criterion) {
    let fx = fixture();
    c.bench_function("output_distributions_500", |bencher| {
        bencher.iter(|| output_distributions(black_box(&fx.params), black_box(&fx.task)).unwrap())
    });
}

fn bench_jsd(c: &mut Criterion) {
    let p = vec![0.05, 0.1, 0.15, 0.2, 0.1, 0.05, 0.1, 0.05, 0.1, 0.1];
    let q = vec![0.1, 0.05, 0.1, 0.1, 0.2, 0.15, 0.05, 0.1, 0.1, 0.05];
    c.bench_function("jsd_10way", |bencher| {
        bencher.iter(|| jsd(black_box(&p), black_box(&q)).unwrap())
    });
}

fn bench_derive_stream(c: &mut Criterion) {
    let context = labels!["strategy", 3usize, "epoch", 7usize, "batch", 12usize];
    c.bench_function("derive_stream", |bencher| {
        bencher.iter(|| derive_stream(black_box(42), black_box(&context)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_grad,
    bench_loss,
    bench_audit_distributions,
    bench_jsd,
    bench_derive_stream
);
criterion_main!(benches);
