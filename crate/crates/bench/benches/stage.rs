use aqueduct_core::demo::demo_instance;
use aqueduct_core::{run_stage, Masterplan, RunConfig, SimMode};
use criterion::{criterion_group, criterion_main, Criterion};

fn stage(c: &mut Criterion) {
    let inst = demo_instance();
    let trace = inst.trace(1, 25).unwrap();
    let state = inst.initial_state(&trace);
    let plan = Masterplan::empty(inst.start_year);
    let mut g = c.benchmark_group("demo_year");
    g.sample_size(10);
    for (name, mode) in [("rep", SimMode::Representative), ("full", SimMode::Full)] {
        let cfg = RunConfig { mode, years: 1, record_hours: false, ..Default::default() };
        g.bench_function(name, |b| b.iter(|| run_stage(&inst, state.clone(), &plan, &trace, &cfg, &mut |_| {}).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, stage);
criterion_main!(benches);
