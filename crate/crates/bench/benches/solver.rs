use aqueduct_bench::{ring, two_node};
use aqueduct_core::hydraulics::{solve_step, SolverOptions};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn solver(c: &mut Criterion) {
    let opts = SolverOptions::default();
    let net = two_node();
    c.bench_function("two_node", |b| b.iter(|| solve_step(black_box(&net), &opts).unwrap()));
    for n in [12, 48] {
        let net = ring(n);
        c.bench_function(&format!("ring_{n}"), |b| b.iter(|| solve_step(black_box(&net), &opts).unwrap()));
    }
}

criterion_group!(benches, solver);
criterion_main!(benches);
