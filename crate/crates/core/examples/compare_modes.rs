//! Runs the bundled demo in both simulation modes and compares the first year.
//!
//! `cargo run --release -p aqueduct-core --example compare_modes -- [years]`

use aqueduct_core::demo::demo_instance;
use aqueduct_core::engine::{run_stage, RunConfig, SimMode};
use aqueduct_core::plan::Masterplan;

fn main() {
    let years: u32 = std::env::args().nth(1).map_or(25, |a| a.parse().expect("years must be a number"));
    let inst = demo_instance();
    let trace = inst.trace(2025, years).expect("trace");
    let state = inst.initial_state(&trace);
    let plan = Masterplan::empty(inst.start_year);
    for mode in [SimMode::Representative, SimMode::Full] {
        let cfg = RunConfig { mode, years, record_hours: false, ..Default::default() };
        let t = std::time::Instant::now();
        let out = run_stage(&inst, state.clone(), &plan, &trace, &cfg, &mut |_| {}).expect("stage");
        let first = out.muni_years.iter().filter(|m| m.year == inst.start_year);
        let (demand, delivered) = first.fold((0.0, 0.0), |(d, q), m| {
            (d + m.billable_demand() + m.nrw_demand, q + m.billable_delivered() + m.nrw_delivered)
        });
        println!("{mode:?}: {years} years in {:.2?}, {} unconverged hours", t.elapsed(), out.nonconverged);
        println!("  {}: demand {demand:.0} m3, delivered {delivered:.0} m3", inst.start_year);
        for s in out.source_years.iter().filter(|s| s.year == inst.start_year) {
            println!("  {} volume {:.0} m3, fine {:.0}", s.source, s.volume, s.fine);
        }
    }
}
