use std::hint::black_box;

use ancl_core::analysis::cka_linear;
use ancl_core::nn::{backward_ce, forward, init_weights};
use ancl_core::oracle::{closed_form_iterate, simulate_updates, QuadDynSpec};
use ancl_core::{ArchSpec, Head};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn forward_backward(c: &mut Criterion) {
    let arch = ArchSpec::multi_head(8, vec![64, 32], vec![2; 5]);
    let w = init_weights(&arch, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("forward 8-64-32-5x2", |b| {
        b.iter(|| forward(&arch, black_box(&w), black_box(&x), Head::Task(2)).unwrap())
    });
    c.bench_function("forward+backward 8-64-32-5x2", |b| {
        b.iter(|| {
            let t = forward(&arch, black_box(&w), black_box(&x), Head::Task(2)).unwrap();
            backward_ce(&arch, &w, &t, 1).unwrap()
        })
    });
}

fn cka(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = |d: usize| -> Vec<Vec<f64>> {
        (0..200).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let (a, b) = (m(64), m(32));
    c.bench_function("linear CKA 200x64 vs 200x32", |bench| {
        bench.iter(|| cka_linear(black_box(&a), black_box(&b)).unwrap())
    });
}

fn quadratic_dynamics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = QuadDynSpec::random(&mut rng, 100, 200, true);
    c.bench_function("closed-form iterate d=100 k=200", |b| b.iter(|| closed_form_iterate(black_box(&spec)).unwrap()));
    c.bench_function("simulated updates d=100 k=200", |b| b.iter(|| simulate_updates(black_box(&spec)).unwrap()));
}

criterion_group!(benches, forward_backward, cka, quadratic_dynamics);
criterion_main!(benches);
