use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use relkam_core::kam::{default_gate_constant, resonance_check, solve_homological_kam};
use relkam_core::testing::random_hermitian;
use relkam_core::{lie_series, Block, FrequencyPoint, KamParams, KamState, Truncation, C64};

fn params() -> KamParams {
    KamParams {
        tau: 2.5,
        sigma: 1.5,
        alpha: 1e-6,
        n0: 8.0,
        k_steps: 3,
        lie_order: 12,
        gate_constant: default_gate_constant(),
    }
}

fn state(t: Truncation) -> KamState {
    let lambda: Vec<Block> = (0..t.n_blocks())
        .map(|j| Block::identity(j).scale(C64::new(((j * j) as f64 + 0.0625).sqrt(), 0.0)))
        .collect();
    let p = random_hermitian(t, 3, 2.0, None);
    let omega = FrequencyPoint::new(vec![(1.0 + 5f64.sqrt()) / 2.0], None).unwrap();
    KamState::new(lambda, p, omega, &params()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let t = Truncation::new(1, 32, 6).unwrap();
    let a = random_hermitian(t, 1, 2.0, None);
    let b = random_hermitian(t, 2, 2.0, None);
    c.bench_function("product J=32 L=6", |bn| bn.iter(|| black_box(&a).product(black_box(&b))));

    let g = a.scaled(C64::new(1e-3, 0.0));
    c.bench_function("lie_series J=32 L=6 order 12", |bn| {
        bn.iter(|| lie_series(black_box(&g), black_box(&b), 12, 0).unwrap())
    });

    let st = state(t);
    let pr = params();
    c.bench_function("resonance_check J=32 L=6 N=23", |bn| bn.iter(|| resonance_check(black_box(&st), &pr, 23)));
    c.bench_function("solve_homological_kam J=32 L=6 N=23", |bn| {
        bn.iter(|| solve_homological_kam(black_box(&st), &pr, 23).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels
}
criterion_main!(benches);
