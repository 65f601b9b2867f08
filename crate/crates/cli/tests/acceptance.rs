//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use aqueduct_bench::{bisect, loop_closures, mass_residuals, random_networks, resistance, two_node};
use aqueduct_core::demand::ProfileLibrary;
use aqueduct_core::demo::demo_instance;
use aqueduct_core::domain::SourceType;
use aqueduct_core::economy::coupon_rate;
use aqueduct_core::engine::{demand_for_year, RunOutput};
use aqueduct_core::hydraulics::{solve_step, HydraulicNetwork, SolverOptions};
use aqueduct_core::kpi::{affordability, reliability, tac};
use aqueduct_core::nrw::{classify, km_pipes, NrwClass};
use aqueduct_core::plan::{load_plan, validate_plan, ViolationKind};
use aqueduct_core::{run_stage, Instance, Masterplan, RunConfig, ScenarioTrace, SimMode};

const HEAD_TARGET: f64 = 49.4711;
const HEAD_TOL: f64 = 1e-4;
const SOLVE_BUDGET: Duration = Duration::from_millis(1);
const PDA_TOL: f64 = 1e-6;
const MASS_TOL: f64 = 1e-6;
const LOOP_TOL: f64 = 1e-6;
const AF_TOL: f64 = 1e-4;
const DEMAND_REL_TOL: f64 = 1e-3;
const REP_VS_FULL_TOL: f64 = 0.05;
const STAGE_BUDGET: Duration = Duration::from_secs(60);
const DEMO_SEED: u64 = 2025;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn c1_two_node() -> Outcome {
    let net = two_node();
    let opts = SolverOptions::default();
    let sol = solve_step(&net, &opts).expect("two-node solve");
    let head = sol.junctions[0].head;
    let q = 360.0 / 3600.0;
    let oracle = 50.0 - resistance(1000.0, 0.5, 0.02) * q * q;
    let mut times: Vec<Duration> = (0..1000)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(solve_step(std::hint::black_box(&net), &opts).unwrap());
            t.elapsed()
        })
        .collect();
    times.sort();
    let median = times[times.len() / 2];
    let worst = times[times.len() - 1];
    let pass = sol.converged && (head - HEAD_TARGET).abs() <= HEAD_TOL && (head - oracle).abs() <= HEAD_TOL && median < SOLVE_BUDGET;
    outcome(
        pass,
        format!("head {head:.6} m (target {HEAD_TARGET} ± {HEAD_TOL:e}, closed form {oracle:.6}); median solve {median:?}, worst {worst:?} (< {SOLVE_BUDGET:?})"),
    )
}

fn pda_net(source: f64, demand: f64) -> HydraulicNetwork {
    let mut net = HydraulicNetwork::new();
    let r = net.add_fixed_head("R", source);
    let j = net.add_junction("J", 0.0, demand);
    net.add_pipe("P", r, j, 1000.0, 0.5, 0.02);
    net
}

fn c2_pda() -> Outcome {
    let r = resistance(1000.0, 0.5, 0.02);
    let demand = 360.0;
    let q_of = |p: f64| if p <= 0.0 { 0.0 } else if p >= 30.0 { demand } else { demand * (p / 30.0).sqrt() };
    let mut worst: f64 = 0.0;
    let mut exact = true;
    let mut cases = 0;
    for p in [0.05, 0.5, 1.0, 2.0, 5.0, 7.5, 10.0, 15.0, 20.0, 25.0, 29.0, 29.99] {
        let q = q_of(p) / 3600.0;
        let source = p + r * q * q;
        let sol = solve_step(&pda_net(source, demand), &SolverOptions::default()).unwrap();
        let j = &sol.junctions[0];
        let p_star = bisect(0.0, source, |x| {
            let q = q_of(x) / 3600.0;
            source - x - r * q * q
        });
        let ratio = j.delivered / demand;
        worst = worst.max((ratio - (j.pressure / 30.0).sqrt()).abs()).max((ratio - (p_star / 30.0).sqrt()).abs());
        cases += 1;
    }
    for p in [30.0, 30.5, 45.0, 80.0] {
        let q = demand / 3600.0;
        let sol = solve_step(&pda_net(p + r * q * q, demand), &SolverOptions::default()).unwrap();
        exact &= sol.junctions[0].delivered == demand;
        cases += 1;
    }
    outcome(worst <= PDA_TOL && exact, format!("{cases} cases; max |ratio - (p/30)^0.5| {worst:.2e} (≤ {PDA_TOL:e}); full delivery exact at p ≥ 30: {exact}"))
}

fn c3_mass_balance() -> Outcome {
    let nets = random_networks(2024, 200);
    let opts = SolverOptions::default();
    let (mut worst_mass, mut worst_loop, mut loops, mut unconverged): (f64, f64, usize, usize) = (0.0, 0.0, 0, 0);
    for net in &nets {
        let sol = solve_step(net, &opts).expect("random network solve");
        unconverged += usize::from(!sol.converged);
        for r in mass_residuals(net, &sol) {
            worst_mass = worst_mass.max(r.abs());
        }
        for c in loop_closures(net, &sol) {
            worst_loop = worst_loop.max(c.abs());
            loops += 1;
        }
    }
    outcome(
        worst_mass <= MASS_TOL && worst_loop <= LOOP_TOL && unconverged == 0,
        format!("200 networks, {loops} loops; max residual {worst_mass:.2e} m3/h, max loop closure {worst_loop:.2e} m, unconverged {unconverged}"),
    )
}

fn c4_nrw() -> Outcome {
    use NrwClass::*;
    let ages = [0.0, 24.9, 25.0, 42.9, 43.0, 53.9, 54.0, 59.9, 60.0, 100.0];
    let expected = [A, A, B, B, C, C, D, D, E, E];
    let got: Vec<NrwClass> = ages.iter().map(|a| classify(*a).unwrap()).collect();
    let km = km_pipes(10_000.0);
    outcome(got == expected && km == 57.7, format!("classes {got:?}; km_pipes(10000) = {km}"))
}

fn c5_kpi() -> Outcome {
    let rel = reliability(&[(100.0, 80.0)]);
    let c08 = coupon_rate(0.03, 0.01, 0.02, 0.8);
    let c12 = coupon_rate(0.03, 0.01, 0.02, 1.2);
    let af = affordability(1.0, 4.5, 10.0, 1500.0).unwrap();
    let t = tac(&[(1000.0, 10.0)], 50.0, &[(0.04, 200.0)]).unwrap();
    let pass = rel == Some(0.8) && c08 == 0.044 && c12 == 0.036 && (af - 0.9667).abs() <= AF_TOL && t == 158.0;
    outcome(pass, format!("reliability {rel:?}; coupon {c08} at d=0.8, {c12} at d=1.2; AF {af:.6}; TAC {t}"))
}

fn c6_demand(inst: &Instance, trace: &ScenarioTrace) -> Outcome {
    let library = ProfileLibrary::synthetic(inst.demand.profiles_per_class);
    let mut state = inst.initial_state(trace);
    let collect = |state: &aqueduct_core::WorldState| {
        let mut rows = Vec::new();
        for year in inst.start_year.. {
            let per = demand_for_year(inst, &library, state, trace, year).unwrap();
            for (id, (vol, s)) in per {
                rows.push((year, id, vol.total(), s));
                if rows.len() == 100 {
                    return rows;
                }
            }
        }
        rows
    };
    state.year = inst.start_year;
    let a = collect(&state);
    let b = collect(&state);
    let mut worst: f64 = 0.0;
    let mut negative = 0;
    for (_, _, annual, s) in &a {
        let total: f64 = s.residential.iter().chain(&s.non_residential).sum();
        worst = worst.max((total - annual).abs() / annual);
        negative += s.residential.iter().chain(&s.non_residential).filter(|v| **v < 0.0).count();
    }
    let identical = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x.2.to_bits() == y.2.to_bits()
                && x.3.residential.iter().zip(&y.3.residential).all(|(p, q)| p.to_bits() == q.to_bits())
                && x.3.non_residential.iter().zip(&y.3.non_residential).all(|(p, q)| p.to_bits() == q.to_bits())
        });
    outcome(
        a.len() == 100 && worst <= DEMAND_REL_TOL && negative == 0 && identical,
        format!("{} muni-years; max |sum - annual|/annual {worst:.2e} (≤ {DEMAND_REL_TOL:e}); negative hours {negative}; bit-identical rerun {identical}", a.len()),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn c7_cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_aqueduct"))
            .args(["simulate", "--seed", "2025", "--mode", "rep", "--years", "25", "--out"])
            .arg(&out)
            .output()
            .expect("run aqueduct");
        (status.status.success(), out)
    };
    let (ok_a, a) = run("a");
    let (ok_b, b) = run("b");
    if !(ok_a && ok_b) {
        return outcome(false, "simulate exited with an error");
    }
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    let bytes: usize = fa.iter().map(|(_, b)| b.len()).sum();
    let same = fa == fb;
    outcome(same, format!("{} files, {bytes} bytes; byte-identical {same}", fa.len()))
}

fn c8_daily_caps(full: &RunOutput, trace: &ScenarioTrace) -> Outcome {
    let mut over = 0;
    let mut surface_off_days = 0;
    let mut surface_off_leaks = 0;
    for d in &full.source_days {
        if d.outflow > d.nominal {
            over += 1;
        }
        let surface = full.final_state.sources.get(&d.source).is_some_and(|s| s.source_type == SourceType::Surface);
        if surface && !trace.available(d.source.as_str(), d.year, d.day) {
            surface_off_days += 1;
            if d.outflow != 0.0 {
                surface_off_leaks += 1;
            }
        }
    }
    outcome(
        over == 0 && surface_off_leaks == 0 && surface_off_days > 0,
        format!(
            "{} source-days; above nominal {over}; surface days with availability 0: {surface_off_days}, delivering > 0: {surface_off_leaks}",
            full.source_days.len()
        ),
    )
}

fn c9_fixtures(inst: &Instance, trace: &ScenarioTrace) -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    let state = inst.initial_state(trace);
    let mut all = true;
    let mut parts = Vec::new();
    for (file, want) in [
        ("plan_permit_violation.json", ViolationKind::PermitRule),
        ("plan_duplicate_pipe.json", ViolationKind::DuplicatePipe),
        ("plan_unknown_site.json", ViolationKind::UnknownSite),
    ] {
        let plan = load_plan(&dir.join(file)).unwrap();
        let got: Vec<ViolationKind> = validate_plan(&plan, inst, &state).into_iter().map(|v| v.kind).collect();
        all &= got == [want];
        parts.push(format!("{file}: {got:?}"));
    }
    outcome(all, parts.join("; "))
}

fn annual_delivered(out: &RunOutput, year: i32) -> f64 {
    out.muni_years.iter().filter(|m| m.year == year).map(|m| m.billable_delivered() + m.nrw_delivered).sum()
}

fn c10_rep_vs_full(full: &RunOutput, rep: &RunOutput) -> Outcome {
    let year = full.start_year;
    let (f, r) = (annual_delivered(full, year), annual_delivered(rep, year));
    let rel = (r - f).abs() / f;
    outcome(rel <= REP_VS_FULL_TOL, format!("{year}: full {f:.0} m3, representative {r:.0} m3, difference {:.3}% (≤ 5%)", 100.0 * rel))
}

fn c11_stage_time(inst: &Instance, trace: &ScenarioTrace) -> Outcome {
    let cfg = RunConfig { mode: SimMode::Representative, years: 25, ..Default::default() };
    let t = Instant::now();
    let out = run_stage(inst, inst.initial_state(trace), &Masterplan::empty(inst.start_year), trace, &cfg, &mut |_| {});
    let elapsed = t.elapsed();
    let sources = inst.sources.len();
    let munis = inst.municipalities.len();
    match out {
        Ok(_) => outcome(elapsed < STAGE_BUDGET, format!("{munis} municipalities, {sources} sources, 25 years in {elapsed:.2?} (< {STAGE_BUDGET:?})")),
        Err(e) => outcome(false, format!("stage failed: {e}")),
    }
}

fn main() {
    let inst = demo_instance();
    let trace = inst.trace(DEMO_SEED, 25).unwrap();
    let one_year = |mode| {
        let cfg = RunConfig { mode, years: 1, ..Default::default() };
        run_stage(&inst, inst.initial_state(&trace), &Masterplan::empty(inst.start_year), &trace, &cfg, &mut |_| {}).unwrap()
    };
    let full = one_year(SimMode::Full);
    let rep = one_year(SimMode::Representative);

    let results: Vec<(&str, Outcome)> = vec![
        ("two-node head and solve time", c1_two_node()),
        ("pressure-driven delivery", c2_pda()),
        ("mass balance and loop closure", c3_mass_balance()),
        ("NRW classes and network length", c4_nrw()),
        ("KPI formulas", c5_kpi()),
        ("hourly demand", c6_demand(&inst, &trace)),
        ("simulate determinism", c7_cli_determinism()),
        ("daily source caps", c8_daily_caps(&full, &trace)),
        ("plan fixtures", c9_fixtures(&inst, &trace)),
        ("representative vs full", c10_rep_vs_full(&full, &rep)),
        ("25-year representative stage", c11_stage_time(&inst, &trace)),
    ];
    let mut failed = 0;
    for (k, (name, o)) in results.iter().enumerate() {
        println!("{} [{:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, k + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
