//! The staged simulation loop.
//!
//! Each year: lifecycle events, asset ageing, due interventions, budget
//! allocation, NRW and demand draws; then hourly solves over every day
//! (full mode) or one week per month (representative mode); then costs,
//! fines, revenue, NRW renewal, bonds and KPI cells.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{
    age_pump_fleet, check_groundwater_permit, production_cost, pv_yield, schedule_construction, uniform_years,
    CostBreakdown, SourceSizeClass, PV_LIFETIME_YEARS,
};
use crate::calendar::{month_start_day, SimDay, DAYS_PER_YEAR, HOURS_PER_DAY, MONTH_LENGTHS};
use crate::demand::{
    mixing_weight, phase1_annual_volumes, AnnualVolume, phase2_assign_profiles, phase3_hourly_series, DemandError, DemandSeries,
    MuniDrivers, ProfileLibrary,
};
use crate::domain::{
    AssetKind, CapitalAsset, DomainError, MunicipalityStatus, PipeInstance, PipeState, PumpUnit, PumpingStation,
    PvInstallation, SizeClass, SourceType, StationState, WaterSource, WorldState,
};
use crate::economy::{allocate_budget, normalise_shape, AllocationRule, BondMarket, EconomyError, LedgerYear, UtilityStats, YearFlows};
use crate::hydraulics::{solve_step, HydraulicError, HydraulicNetwork, Node, PumpCurve};
use crate::ids::{HouseholdClassId, MunicipalityId, PumpOptionId, SourceId, StationId, UtilityId};
use crate::instance::Instance;
use crate::kpi::{evaluate, AffordabilityCell, CostCell, KpiInputs, KpiReport, ServiceCell, Slice};
use crate::nrw::{apply_nrw_intervention, km_pipes_with_ratio, NrwError, NrwPolicy, NrwTarget};
use crate::plan::{site_station, validate_plan, Intervention, Masterplan, Violation};
use crate::scenario::{ScenarioError, ScenarioTrace};
use crate::seed;

pub const STAGE_YEARS: u32 = 25;

/// Household class that carries business demand and NRW in service cells.
pub const OTHER_CLASS: &str = "other";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Full,
    #[serde(alias = "rep")]
    Representative,
}

impl SimMode {
    /// Simulated days of a year with the number of days each stands for.
    pub fn days(self) -> Vec<(usize, f64)> {
        match self {
            SimMode::Full => (0..DAYS_PER_YEAR).map(|d| (d, 1.0)).collect(),
            SimMode::Representative => (0..12)
                .flat_map(|m| {
                    let start = month_start_day(m);
                    let w = MONTH_LENGTHS[m] as f64 / 7.0;
                    (start + 7..start + 14).map(move |d| (d, w))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: SimMode,
    pub years: u32,
    /// Non-converged hourly solves tolerated per stage before aborting.
    pub failure_budget: usize,
    /// Keep one summary row per simulated hour.
    pub record_hours: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { mode: SimMode::Representative, years: STAGE_YEARS, failure_budget: 100, record_hours: true }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("plan is invalid:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    PlanInvalid(Vec<Violation>),
    #[error("trace covers {have_start}..{have_end} but the stage needs {need_start}..{need_end}")]
    TraceTooShort { have_start: i32, have_end: i32, need_start: i32, need_end: i32 },
    #[error("hydraulic failure on {date} hour {hour}: {source}")]
    Hydraulic { date: NaiveDate, hour: usize, source: HydraulicError },
    #[error("{failures} hourly solves did not converge (budget {budget}); last on {date} hour {hour}, residual {residual:.3e} m3/h")]
    FailureBudget { failures: usize, budget: usize, date: NaiveDate, hour: usize, residual: f64 },
    #[error("lifecycle event on {date}: {source}")]
    Lifecycle { date: NaiveDate, source: DomainError },
    #[error("demand in {year}: {source}")]
    Demand { year: i32, source: DemandError },
    #[error("NRW in {year}: {source}")]
    Nrw { year: i32, source: NrwError },
    #[error("budget in {year}: {source}")]
    Economy { year: i32, source: EconomyError },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourRecord {
    pub year: i32,
    pub day: usize,
    pub hour: usize,
    /// m³/h including NRW
    pub demand: f64,
    pub delivered: f64,
    pub pumped: f64,
    /// kWh bought from the grid
    pub grid_kwh: f64,
    pub pv_kwh: f64,
    /// €
    pub energy_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDay {
    pub year: i32,
    pub day: usize,
    pub source: SourceId,
    /// m³ over the calendar day
    pub outflow: f64,
    pub nominal: f64,
    pub available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuniYear {
    pub year: i32,
    pub municipality: MunicipalityId,
    pub utility: UtilityId,
    pub population: f64,
    pub network_age: f64,
    pub nrw_class: String,
    /// m³/year
    pub residential_demand: f64,
    pub residential_delivered: f64,
    pub business_demand: f64,
    pub business_delivered: f64,
    pub nrw_demand: f64,
    pub nrw_delivered: f64,
}

impl MuniYear {
    pub fn billable_demand(&self) -> f64 {
        self.residential_demand + self.business_demand
    }

    pub fn billable_delivered(&self) -> f64 {
        self.residential_delivered + self.business_delivered
    }

    pub fn undelivered(&self) -> f64 {
        (self.billable_demand() + self.nrw_demand - self.billable_delivered() - self.nrw_delivered).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceYear {
    pub year: i32,
    pub source: SourceId,
    pub utility: UtilityId,
    /// m³/year
    pub volume: f64,
    pub cost: CostBreakdown,
    pub fine: f64,
    pub grid_kwh: f64,
    pub energy_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub date: NaiveDate,
    pub kind: String,
    pub detail: String,
    /// € booked by the event
    pub cost: f64,
}

/// Observable past: prices, consumption, undelivered demand, fines and tariffs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub up_to_year: i32,
    pub drivers: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    pub consumption: Vec<ObservedMuniYear>,
    pub fines: Vec<ObservedFine>,
    pub tariffs: Vec<ObservedTariff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedMuniYear {
    pub year: i32,
    pub municipality: MunicipalityId,
    /// Billed consumption, m³
    pub consumption: f64,
    pub undelivered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedFine {
    pub year: i32,
    pub source: SourceId,
    pub fine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedTariff {
    pub year: i32,
    pub utility: UtilityId,
    pub fixed_per_month: f64,
    pub volumetric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub config: RunConfig,
    pub master_seed: u64,
    pub start_year: i32,
    pub end_year: i32,
    pub hours: Vec<HourRecord>,
    pub source_days: Vec<SourceDay>,
    pub muni_years: Vec<MuniYear>,
    pub source_years: Vec<SourceYear>,
    pub ledgers: Vec<LedgerYear>,
    pub events: Vec<EventRecord>,
    pub kpi_inputs: KpiInputs,
    pub kpi: KpiReport,
    pub history: History,
    pub final_state: WorldState,
    pub nonconverged: usize,
}

/// Progress after each simulated year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Progress {
    pub year: i32,
    pub done: u32,
    pub total: u32,
}

/// Past observations up to (excluding) `up_to_year`.
pub fn reveal_history(trace: &ScenarioTrace, output: &RunOutput, up_to_year: i32) -> History {
    History {
        up_to_year,
        drivers: trace.reveal(up_to_year),
        consumption: output
            .muni_years
            .iter()
            .filter(|m| m.year < up_to_year)
            .map(|m| ObservedMuniYear {
                year: m.year,
                municipality: m.municipality.clone(),
                consumption: m.billable_delivered(),
                undelivered: m.undelivered(),
            })
            .collect(),
        fines: output
            .source_years
            .iter()
            .filter(|s| s.year < up_to_year && s.fine > 0.0)
            .map(|s| ObservedFine { year: s.year, source: s.source.clone(), fine: s.fine })
            .collect(),
        tariffs: output.history.tariffs.iter().filter(|t| t.year < up_to_year).cloned().collect(),
    }
}

/// Carry a finished stage into the next: the final state, the revealed
/// history, and the replacement plan validated against that state.
pub fn step_stage_boundary(
    instance: &Instance,
    prev: &RunOutput,
    new_plan: &Masterplan,
) -> Result<(WorldState, History), Vec<Violation>> {
    let state = prev.final_state.clone();
    let violations = validate_plan(new_plan, instance, &state);
    if violations.is_empty() {
        Ok((state, prev.history.clone()))
    } else {
        Err(violations)
    }
}

struct CurveCache(BTreeMap<PumpOptionId, Arc<PumpCurve>>);

impl CurveCache {
    fn new(inst: &Instance) -> Self {
        Self(inst.pump_options.iter().map(|p| (p.id.clone(), Arc::new(p.curve.clone()))).collect())
    }
}

/// The hydraulic model of one day plus the maps back to entities.
struct DayNetwork {
    net: HydraulicNetwork,
    munis: Vec<MunicipalityId>,
    /// Pump index -> (source, station)
    pumps: Vec<(SourceId, StationId)>,
    max_flow: Vec<f64>,
}

#[derive(Default, Clone, Copy)]
struct MuniAcc {
    res_d: f64,
    res_q: f64,
    bus_d: f64,
    bus_q: f64,
    nrw_d: f64,
    nrw_q: f64,
}

#[derive(Default, Clone)]
struct SourceAcc {
    volume: f64,
    cost: CostBreakdown,
    grid_kwh: f64,
    energy_cost: f64,
    operational_t: f64,
}

struct Engine<'a> {
    inst: &'a Instance,
    trace: &'a ScenarioTrace,
    plan: &'a Masterplan,
    cfg: &'a RunConfig,
    state: WorldState,
    curves: CurveCache,
    library: ProfileLibrary,
    shape: [f64; 24],
    cluster_targets: BTreeSet<MunicipalityId>,
    pending: Vec<Intervention>,
    out: RunOutput,
    failures: usize,
}

/// Simulate one stage of `cfg.years` years from `state`.
pub fn run_stage(
    instance: &Instance,
    state: WorldState,
    plan: &Masterplan,
    trace: &ScenarioTrace,
    cfg: &RunConfig,
    progress: &mut dyn FnMut(Progress),
) -> Result<RunOutput, EngineError> {
    let violations = validate_plan(plan, instance, &state);
    if !violations.is_empty() {
        return Err(EngineError::PlanInvalid(violations));
    }
    let first = state.year;
    let last = first + cfg.years as i32;
    if trace.start_year > first || trace.end_year() < last {
        return Err(EngineError::TraceTooShort {
            have_start: trace.start_year,
            have_end: trace.end_year(),
            need_start: first,
            need_end: last,
        });
    }
    let pending = plan
        .schedule()
        .into_iter()
        .map(|(_, iv)| iv.clone())
        .filter(|iv| (first..last).contains(&iv.effective_date().year()))
        .filter(|iv| !matches!(iv, Intervention::NrwBudget { .. } | Intervention::BudgetRule { .. }))
        .collect();
    let mut engine = Engine {
        inst: instance,
        trace,
        plan,
        cfg,
        curves: CurveCache::new(instance),
        library: ProfileLibrary::synthetic(instance.demand.profiles_per_class),
        shape: normalise_shape(&instance.economy.price_shape),
        cluster_targets: instance.cluster_targets(),
        pending,
        out: RunOutput {
            config: cfg.clone(),
            master_seed: trace.master_seed,
            start_year: first,
            end_year: last,
            hours: Vec::new(),
            source_days: Vec::new(),
            muni_years: Vec::new(),
            source_years: Vec::new(),
            ledgers: Vec::new(),
            events: Vec::new(),
            kpi_inputs: KpiInputs::default(),
            kpi: evaluate(&KpiInputs::default(), &Slice::national()),
            history: History::default(),
            final_state: state.clone(),
            nonconverged: 0,
        },
        state,
        failures: 0,
    };
    for (k, year) in (first..last).enumerate() {
        engine.simulate_year(year)?;
        engine.state.year = year + 1;
        progress(Progress { year, done: k as u32 + 1, total: cfg.years });
    }
    let mut out = engine.out;
    out.nonconverged = engine.failures;
    out.kpi = evaluate(&out.kpi_inputs, &Slice::national());
    out.final_state = engine.state;
    out.history = reveal_history(trace, &out, last);
    out.history.tariffs = tariff_history(instance, trace, first, last);
    Ok(out)
}

fn tariff_history(inst: &Instance, trace: &ScenarioTrace, first: i32, last: i32) -> Vec<ObservedTariff> {
    let mut v = Vec::new();
    for year in first..last {
        let pi = trace.price_index(year);
        for t in &inst.economy.tariffs {
            v.push(ObservedTariff {
                year,
                utility: t.utility.clone(),
                fixed_per_month: t.fixed_per_month * pi,
                volumetric: t.volumetric * pi,
            });
        }
    }
    v
}

/// Annual volumes and hourly billable demand of every open municipality in `year`.
pub fn demand_for_year(
    inst: &Instance,
    library: &ProfileLibrary,
    state: &WorldState,
    trace: &ScenarioTrace,
    year: i32,
) -> Result<BTreeMap<MunicipalityId, (AnnualVolume, DemandSeries)>, EngineError> {
    let d = &inst.demand;
    let hh_index = trace.national("per_household_demand", year)?;
    let bus_index = trace.national("per_business_demand", year)?;
    let open: Vec<_> = state.open_municipalities().map(|m| &m.muni).collect();
    if open.is_empty() {
        return Ok(BTreeMap::new());
    }
    let drivers: Vec<MuniDrivers> = open
        .iter()
        .map(|m| MuniDrivers {
            municipality: m.id.clone(),
            houses: m.houses,
            businesses: m.businesses,
            per_household: d.per_household * hh_index,
            per_business: d.per_business * bus_index,
        })
        .collect();
    let population: f64 = open.iter().map(|m| m.population).sum();
    let target = population * d.national_target_lpcd * hh_index * 365.0 / 1000.0;
    let err = |source| EngineError::Demand { year, source };
    let plan = phase1_annual_volumes(&drivers, target, d.volume_sigma, trace.master_seed, year).map_err(err)?;
    let t_max = trace.national("max_temperature", year)?;
    let mut out = BTreeMap::new();
    for (m, vol) in open.iter().zip(plan.volumes) {
        let class = SizeClass::of(m.population);
        let mut prng = seed::stream(trace.master_seed, "demand.profiles", &format!("{}/{class:?}", m.id));
        let choice = phase2_assign_profiles(class, library, &mut prng).map_err(err)?;
        let mut rng = seed::stream(trace.master_seed, "demand.hourly", &format!("{}/{year}", m.id));
        let w = mixing_weight(m.houses, m.businesses);
        let s = phase3_hourly_series(&vol, year, library, class, choice, w, t_max, &d.phase3, &mut rng).map_err(err)?;
        out.insert(m.id.clone(), (vol, s));
    }
    Ok(out)
}

fn jan1(year: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year")
}

fn mean_lifetime(bounds: [u32; 2]) -> f64 {
    0.5 * (bounds[0] + bounds[1]) as f64
}

impl Engine<'_> {
    fn utility_of(&self, province: &crate::ids::ProvinceId) -> UtilityId {
        self.state
            .utility_of_province(province)
            .cloned()
            .unwrap_or_else(|| self.state.utilities[0].id.clone())
    }

    fn event(&mut self, date: NaiveDate, kind: &str, detail: String, cost: f64) {
        self.out.events.push(EventRecord { date, kind: kind.to_owned(), detail, cost });
    }

    #[allow(clippy::too_many_arguments)]
    fn book(&mut self, utility: UtilityId, kind: AssetKind, label: String, year: i32, capex: f64, lifetime: f64, embedded: f64, unplanned: bool) {
        self.state.assets.push(CapitalAsset { utility, kind, label, year, capex, lifetime, embedded, unplanned });
    }

    fn ef_per_eur(&self) -> f64 {
        self.inst.economy.embedded_ef_per_eur
    }

    fn budget_rule(&self, year: i32) -> AllocationRule {
        self.plan
            .interventions
            .iter()
            .filter_map(|iv| match iv {
                Intervention::BudgetRule { rule, year: y } if *y <= year => Some((*y, rule)),
                _ => None,
            })
            .max_by_key(|(y, _)| *y)
            .map_or_else(|| self.inst.economy.budget_rule.clone(), |(_, r)| r.clone())
    }

    fn nrw_setting(&self, utility: &UtilityId, year: i32) -> Option<(f64, NrwPolicy)> {
        self.plan
            .interventions
            .iter()
            .filter_map(|iv| match iv {
                Intervention::NrwBudget { utility: u, share, policy, year: y } if u == utility && *y <= year => {
                    Some((*y, *share, *policy))
                }
                _ => None,
            })
            .max_by_key(|(y, _, _)| *y)
            .map(|(_, s, p)| (s, p))
    }

    fn simulate_year(&mut self, year: i32) -> Result<(), EngineError> {
        let date0 = jan1(year);
        let pi = self.trace.price_index(year);

        for ev in self.trace.events.iter().filter(|e| e.date == date0) {
            self.state
                .apply_lifecycle_event(&ev.event, date0)
                .map_err(|source| EngineError::Lifecycle { date: date0, source })?;
            self.out.events.push(EventRecord { date: date0, kind: "lifecycle".into(), detail: format!("{:?}", ev.event), cost: 0.0 });
        }
        self.state.open_due(date0, &self.cluster_targets);

        if year > self.inst.start_year {
            self.age_assets(year, pi)?;
        }
        self.apply_due(date0, pi);

        let allocated = self.allocate(year, pi)?;

        // NRW and billable demand for the year
        let table = &self.inst.nrw.table;
        let mut nrw_day: BTreeMap<MunicipalityId, f64> = BTreeMap::new();
        let mut nrw_class: BTreeMap<MunicipalityId, String> = BTreeMap::new();
        for m in self.state.open_municipalities() {
            let class = table.classify(m.muni.dist_net_avg_age).map_err(|source| EngineError::Nrw { year, source })?;
            let km = km_pipes_with_ratio(m.muni.population, self.inst.nrw.km_per_10k);
            let u = self.trace.realize("nrw", &format!("{}/{year}", m.muni.id));
            nrw_day.insert(m.muni.id.clone(), table.rate_at_quantile(class, u, self.inst.nrw.mode_fraction) * km);
            nrw_class.insert(m.muni.id.clone(), format!("{class:?}"));
        }
        let series: BTreeMap<MunicipalityId, DemandSeries> = demand_for_year(self.inst, &self.library, &self.state, self.trace, year)?
            .into_iter()
            .map(|(id, (_, s))| (id, s))
            .collect();

        let mut muni_acc: BTreeMap<MunicipalityId, MuniAcc> = BTreeMap::new();
        let mut src_acc: BTreeMap<SourceId, SourceAcc> = BTreeMap::new();
        let level = self.trace.national("electricity_price", year)?;
        let ef = self.trace.national("emission_factor", year)?;
        let opts = self.inst.solver.clone();

        for (day, weight) in self.cfg.mode.days() {
            let date = SimDay::new(year, day).to_date();
            self.apply_due(date, pi);
            let mut dn = self.build_network(date);
            let n_pumps = dn.pumps.len();
            let mut remaining = vec![0.0; n_pumps];
            let mut cap = vec![0.0; n_pumps];
            let mut available = vec![true; n_pumps];
            let mut outflow = vec![0.0; n_pumps];
            for (k, (src, _)) in dn.pumps.iter().enumerate() {
                let s = &self.state.sources[src];
                available[k] = s.source_type != SourceType::Surface || self.trace.available(src.as_str(), year, day);
                cap[k] = if available[k] { s.nominal_capacity } else { 0.0 };
                remaining[k] = cap[k];
            }
            let pv_kw: Vec<f64> = dn
                .pumps
                .iter()
                .map(|(_, st)| {
                    self.state.stations[st]
                        .station
                        .pv_installations
                        .iter()
                        .filter(|p| p.install_date <= date && p.install_date.year() + PV_LIFETIME_YEARS > year)
                        .map(|p| p.capacity_kw)
                        .sum()
                })
                .collect();
            for hour in 0..HOURS_PER_DAY {
                let hoy = day * HOURS_PER_DAY + hour;
                for (j, m) in dn.munis.iter().enumerate() {
                    let billable = series.get(m).map_or(0.0, |s| s.at(hoy));
                    dn.net.junctions[j].demand = billable + nrw_day.get(m).copied().unwrap_or(0.0) / 24.0;
                }
                for k in 0..n_pumps {
                    dn.net.pumps[k].flow_cap = Some(remaining[k].max(0.0).min(dn.max_flow[k]));
                }
                let sol = solve_step(&dn.net, &opts).map_err(|source| EngineError::Hydraulic { date, hour, source })?;
                if !sol.converged {
                    self.failures += 1;
                    if self.failures > self.cfg.failure_budget {
                        return Err(EngineError::FailureBudget {
                            failures: self.failures,
                            budget: self.cfg.failure_budget,
                            date,
                            hour,
                            residual: sol.max_residual,
                        });
                    }
                }
                for (j, m) in dn.munis.iter().enumerate() {
                    let r = &sol.junctions[j];
                    let demand = dn.net.junctions[j].demand;
                    let frac = if demand > 0.0 { (r.delivered / demand).clamp(0.0, 1.0) } else { 1.0 };
                    let (res, bus) = series.get(m).map_or((0.0, 0.0), |s| (s.residential[hoy], s.non_residential[hoy]));
                    let nrw = nrw_day.get(m).copied().unwrap_or(0.0) / 24.0;
                    let a = muni_acc.entry(m.clone()).or_default();
                    a.res_d += res * weight;
                    a.res_q += res * frac * weight;
                    a.bus_d += bus * weight;
                    a.bus_q += bus * frac * weight;
                    a.nrw_d += nrw * weight;
                    a.nrw_q += nrw * frac * weight;
                }
                let price = level * self.shape[hour];
                let (mut grid_total, mut pv_total, mut cost_total, mut pumped) = (0.0, 0.0, 0.0, 0.0);
                for (k, (src, _)) in dn.pumps.iter().enumerate() {
                    let p = &sol.pumps[k];
                    let q = p.flow.max(0.0).min(remaining[k].max(0.0));
                    // summed hourly volumes must not creep past the daily cap by rounding
                    outflow[k] = (outflow[k] + q).min(cap[k]);
                    remaining[k] = cap[k] - outflow[k];
                    pumped += q;
                    let pv = (pv_kw[k] * pv_yield(day, hour)).min(p.electric_kw);
                    let grid = p.electric_kw - pv;
                    let a = src_acc.entry(src.clone()).or_default();
                    a.grid_kwh += grid * weight;
                    a.energy_cost += grid * price * weight;
                    a.operational_t += grid * ef / 1000.0 * weight;
                    grid_total += grid;
                    pv_total += pv;
                    cost_total += grid * price;
                }
                if self.cfg.record_hours {
                    self.out.hours.push(HourRecord {
                        year,
                        day,
                        hour,
                        demand: sol.total_demand(),
                        delivered: sol.total_delivered(),
                        pumped,
                        grid_kwh: grid_total,
                        pv_kwh: pv_total,
                        energy_cost: cost_total,
                        iterations: sol.iterations,
                        converged: sol.converged,
                    });
                }
            }
            // production costs for every active source, also idle ones
            let mut served: BTreeMap<&SourceId, (f64, bool)> = BTreeMap::new();
            for (k, (src, _)) in dn.pumps.iter().enumerate() {
                served.insert(src, (outflow[k], available[k]));
            }
            let active: Vec<SourceId> = self.state.sources.values().filter(|s| s.is_active(date)).map(|s| s.id.clone()).collect();
            for id in active {
                let s = &self.state.sources[&id];
                let (q, avail) = served.get(&id).copied().unwrap_or((0.0, s.source_type != SourceType::Surface || self.trace.available(id.as_str(), year, day)));
                let entry = self.inst.source_cost(SourceSizeClass::of_nominal(s.nominal_capacity));
                let tp = self.inst.source_type_params(s.source_type);
                let c = production_cost(s.nominal_capacity, s.target_factor, q, level, entry, tp.over_target_multiplier, pi)
                    .expect("daily cap keeps volume within nominal capacity");
                let a = src_acc.entry(id.clone()).or_default();
                a.volume += q * weight;
                a.cost.add(&c, weight);
                self.out.source_days.push(SourceDay {
                    year,
                    day,
                    source: id.clone(),
                    outflow: q,
                    nominal: s.nominal_capacity,
                    available: avail,
                });
            }
        }

        self.close_year(year, pi, allocated, muni_acc, src_acc, nrw_class)
    }

    fn allocate(&mut self, year: i32, pi: f64) -> Result<BTreeMap<UtilityId, f64>, EngineError> {
        let mut stats = Vec::new();
        for u in &self.state.utilities {
            let (mut pop, mut inc) = (0.0, 0.0);
            for m in self.state.open_municipalities().filter(|m| m.muni.province == u.province) {
                pop += m.muni.population;
                inc += m.muni.population * self.trace.value("income_index", m.muni.id.as_str(), year).unwrap_or(1.0);
            }
            stats.push(UtilityStats { population: pop, income_index: if pop > 0.0 { inc / pop } else { 1.0 } });
        }
        let total = self.inst.economy.national_budget * pi;
        let shares = allocate_budget(total, &self.budget_rule(year), &stats).map_err(|source| EngineError::Economy { year, source })?;
        Ok(self.state.utilities.iter().map(|u| u.id.clone()).zip(shares).collect())
    }

    fn age_assets(&mut self, year: i32, pi: f64) -> Result<(), EngineError> {
        let date0 = jan1(year);
        for (id, c) in self.state.connections.iter_mut() {
            if let (Some(p), Some(s)) = (c.installed_pipe.as_mut(), self.state.pipes.get(id)) {
                if p.install_date < date0 {
                    p.current_friction += s.decay_rate;
                }
            }
        }
        let station_ids: Vec<StationId> = self.state.stations.keys().cloned().collect();
        for sid in station_ids {
            let st = &self.state.stations[&sid];
            let Some(src) = self.state.sources.get(&st.station.source_id) else { continue };
            if !src.is_active(date0) {
                continue;
            }
            let Some(option) = self.inst.pump_option(&st.station.pump_option) else { continue };
            let (bounds, unit_cost) = (option.lifetime, option.unit_cost * pi);
            let utility = self.utility_of(&src.province);
            let trace = self.trace;
            let key = sid.to_string();
            let st = self.state.stations.get_mut(&sid).expect("listed");
            let replaced =
                age_pump_fleet(st, year, unit_cost, |ordinal| uniform_years(bounds, trace.realize("pump_lifetime", &format!("{key}/{ordinal}"))));
            for r in replaced {
                st.station.pump_install_dates[r.unit] = date0;
                let embedded = r.cost * self.inst.economy.embedded_ef_per_eur;
                self.state.assets.push(CapitalAsset {
                    utility: utility.clone(),
                    kind: AssetKind::Pump,
                    label: format!("{sid} unit {} replacement", r.unit + 1),
                    year,
                    capex: r.cost,
                    lifetime: mean_lifetime(bounds),
                    embedded,
                    unplanned: true,
                });
                self.out.events.push(EventRecord {
                    date: date0,
                    kind: "pump_replacement".into(),
                    detail: format!("{sid} unit {}", r.unit + 1),
                    cost: r.cost,
                });
            }
        }
        for st in self.state.stations.values_mut() {
            st.station.pv_installations.retain(|p| p.install_date.year() + PV_LIFETIME_YEARS > year);
        }
        for m in self.state.municipalities.values_mut().filter(|m| m.status == MunicipalityStatus::Open) {
            m.muni.dist_net_avg_age += 1.0;
            let id = m.muni.id.as_str();
            let now = self.trace.value("population", id, year).unwrap_or(1.0);
            let before = self.trace.value("population", id, year - 1).unwrap_or(now);
            if before > 0.0 && now > 0.0 {
                let ratio = now / before;
                let old_km = m.muni.dist_net_length;
                m.muni.population *= ratio;
                m.muni.houses *= ratio;
                m.muni.businesses *= ratio;
                m.muni.dist_net_length *= ratio;
                // new mains are laid at age zero
                if ratio > 1.0 && m.muni.dist_net_length > 0.0 {
                    m.muni.dist_net_avg_age *= old_km / m.muni.dist_net_length;
                }
            }
        }
        Ok(())
    }

    fn build_network(&self, date: NaiveDate) -> DayNetwork {
        let vis = self.state.visible_network(date);
        let mut net = HydraulicNetwork::new();
        let mut index: BTreeMap<&str, Node> = BTreeMap::new();
        let mut munis = Vec::new();
        for n in vis.nodes.iter().filter(|n| n.kind == crate::domain::NodeKind::Municipality) {
            let node = net.add_junction(n.id.clone(), n.elevation, 0.0);
            index.insert(n.id.as_str(), node);
            munis.push(MunicipalityId::new(n.id.clone()));
        }
        for e in &vis.edges {
            let Some(option) = self.inst.pipe_option(&e.option) else { continue };
            let (a, b) = (index[e.node_a.as_str()], index[e.node_b.as_str()]);
            net.add_pipe(e.connection.to_string(), a, b, e.length, option.diameter, e.friction);
        }
        let by_source: BTreeMap<&SourceId, &StationState> =
            self.state.stations.values().map(|s| (&s.station.source_id, s)).collect();
        let mut pumps = Vec::new();
        let mut max_flow = Vec::new();
        for (src, host) in &vis.sources {
            let Some(st) = by_source.get(src) else { continue };
            if st.units.is_empty() {
                continue;
            }
            let Some(curve) = self.curves.0.get(&st.station.pump_option) else { continue };
            let s = &self.state.sources[src];
            let fixed = net.add_fixed_head(format!("src:{src}"), s.elevation);
            let units = st.units.len() as u32;
            net.add_pump(st.station.id.to_string(), fixed, index[host.as_str()], curve.clone(), units, None);
            pumps.push((src.clone(), st.station.id.clone()));
            max_flow.push(units as f64 * curve.max_flow());
        }
        DayNetwork { net, munis, pumps, max_flow }
    }

    fn apply_due(&mut self, date: NaiveDate, pi: f64) {
        while self.pending.first().is_some_and(|iv| iv.effective_date() <= date) {
            let iv = self.pending.remove(0);
            self.apply(&iv, pi);
        }
    }

    fn apply(&mut self, iv: &Intervention, pi: f64) {
        let date = iv.effective_date();
        let year = date.year();
        let ef = self.ef_per_eur();
        match iv {
            Intervention::OpenSource { site, size, .. } => {
                let Some(s) = self.inst.site(site) else { return };
                let tp = self.inst.source_type_params(s.source_type);
                let activation = schedule_construction(date, tp.construction_years, self.trace.realize("construction", site.as_str()));
                let entry = self.inst.source_cost(SourceSizeClass::of_nominal(*size));
                let capex = entry.construction_unit_cost * size * pi;
                let utility = self.utility_of(&s.province);
                self.book(utility.clone(), AssetKind::Source, format!("source {site}"), year, capex, entry.lifetime, capex * ef, false);
                let station = site_station(site);
                let option = self.inst.pump_option(&s.pump_option).expect("validated");
                let units: Vec<PumpUnit> = (1..=s.pump_count)
                    .map(|k| PumpUnit {
                        install_year: activation.year(),
                        lifetime_years: uniform_years(option.lifetime, self.trace.realize("pump_lifetime", &format!("{station}/{k}"))),
                    })
                    .collect();
                let pump_capex = option.unit_cost * s.pump_count as f64 * pi;
                self.book(utility, AssetKind::Pump, format!("{station} pumps"), year, pump_capex, mean_lifetime(option.lifetime), pump_capex * ef, false);
                self.state.sources.insert(
                    site.clone(),
                    WaterSource {
                        id: site.clone(),
                        source_type: s.source_type,
                        latitude: s.latitude,
                        longitude: s.longitude,
                        elevation: s.elevation,
                        province: s.province.clone(),
                        connected_municipality: s.connected_municipality.clone(),
                        activation_date: activation,
                        closure_date: None,
                        nominal_capacity: *size,
                        target_factor: tp.target_factor,
                        permit: s.permit,
                        max_capacity: s.max_capacity,
                    },
                );
                self.state.stations.insert(
                    station.clone(),
                    StationState {
                        station: PumpingStation {
                            id: station,
                            source_id: site.clone(),
                            pump_option: s.pump_option.clone(),
                            pump_count: s.pump_count,
                            pump_install_dates: vec![activation; s.pump_count as usize],
                            pv_installations: vec![],
                        },
                        units,
                        installs: s.pump_count,
                    },
                );
                self.event(date, "open_source", format!("{site} {size} m3/day, active from {activation}"), capex + pump_capex);
            }
            Intervention::CloseSource { source, .. } => {
                if let Some(s) = self.state.sources.get_mut(source) {
                    if s.closure_date.is_none_or(|c| c > date) {
                        s.closure_date = Some(date);
                    }
                    self.event(date, "close_source", source.to_string(), 0.0);
                }
            }
            Intervention::InstallPipe { connection, option, .. } | Intervention::ReplacePipe { connection, option, .. } => {
                let Some(c) = self.state.connections.get(connection) else { return };
                let Some(o) = self.inst.pipe_option(option) else { return };
                let a = self.state.resolve(&c.node_a).clone();
                let b = self.state.resolve(&c.node_b).clone();
                let cost = o.cost_per_m * c.distance * pi;
                let embedded = o.emissions_per_m * c.distance;
                let ua = self.utility_of(&self.state.municipalities[&a].muni.province);
                let ub = self.utility_of(&self.state.municipalities[&b].muni.province);
                let usable = a != b && self.state.is_open(&a) && self.state.is_open(&b);
                let (charged, label) = if usable { (cost, "pipe") } else { (0.5 * cost, "cancelled pipe") };
                let life = o.lifetime;
                if ua == ub {
                    self.book(ua, AssetKind::Pipe, format!("{label} {connection}"), year, charged, life, if usable { embedded } else { 0.0 }, false);
                } else {
                    let e = if usable { 0.5 * embedded } else { 0.0 };
                    self.book(ua, AssetKind::Pipe, format!("{label} {connection} (shared)"), year, 0.5 * charged, life, e, false);
                    self.book(ub, AssetKind::Pipe, format!("{label} {connection} (shared)"), year, 0.5 * charged, life, e, false);
                }
                if !usable {
                    self.event(date, "pipe_cancelled", format!("{connection}: end municipality closed, half the cost refunded"), charged);
                    return;
                }
                let u = self.trace.realize("pipe_decay", &format!("{connection}/{date}"));
                let rate = o.decay_rate[0] + u * (o.decay_rate[1] - o.decay_rate[0]);
                self.state.pipes.insert(connection.clone(), PipeState { decay_rate: rate, f_new: o.f_new });
                let c = self.state.connections.get_mut(connection).expect("checked");
                c.installed_pipe = Some(PipeInstance { option_id: option.clone(), install_date: date, current_friction: o.f_new });
                self.event(date, iv.kind(), format!("{connection} {option}"), cost);
            }
            Intervention::SetPumps { station, option, count, .. } => {
                let Some(o) = self.inst.pump_option(option) else { return };
                let trace = self.trace;
                let Some(st) = self.state.stations.get_mut(station) else {
                    self.event(date, "set_pumps_skipped", format!("{station} does not exist yet"), 0.0);
                    return;
                };
                let mut new_units = 0u32;
                if &st.station.pump_option != option {
                    st.units.clear();
                    st.station.pump_install_dates.clear();
                    st.station.pump_option = option.clone();
                }
                while st.units.len() > *count as usize {
                    st.units.pop();
                    st.station.pump_install_dates.pop();
                }
                while st.units.len() < *count as usize {
                    st.installs += 1;
                    let life = uniform_years(o.lifetime, trace.realize("pump_lifetime", &format!("{station}/{}", st.installs)));
                    st.units.push(PumpUnit { install_year: year, lifetime_years: life });
                    st.station.pump_install_dates.push(date);
                    new_units += 1;
                }
                st.station.pump_count = *count;
                let province = self.state.sources.get(&st.station.source_id).map(|s| s.province.clone());
                let cost = o.unit_cost * new_units as f64 * pi;
                if let Some(p) = province {
                    let u = self.utility_of(&p);
                    if cost > 0.0 {
                        self.book(u, AssetKind::Pump, format!("{station} pumps"), year, cost, mean_lifetime(o.lifetime), cost * ef, false);
                    }
                }
                self.event(date, "set_pumps", format!("{station} {count} x {option}"), cost);
            }
            Intervention::InstallPv { station, capacity_kw, .. } => {
                let unit = self.trace.national("pv_cost", year).unwrap_or(0.0);
                let Some(st) = self.state.stations.get_mut(station) else {
                    self.event(date, "install_pv_skipped", format!("{station} does not exist yet"), 0.0);
                    return;
                };
                st.station.pv_installations.push(PvInstallation { install_date: date, capacity_kw: *capacity_kw });
                let province = self.state.sources.get(&st.station.source_id).map(|s| s.province.clone());
                let cost = unit * capacity_kw;
                if let Some(p) = province {
                    let u = self.utility_of(&p);
                    self.book(u, AssetKind::Pv, format!("{station} PV"), year, cost, PV_LIFETIME_YEARS as f64, cost * ef, false);
                }
                self.event(date, "install_pv", format!("{station} {capacity_kw} kW"), cost);
            }
            Intervention::NrwBudget { .. } | Intervention::BudgetRule { .. } => {}
        }
    }

    fn close_year(
        &mut self,
        year: i32,
        pi: f64,
        allocated: BTreeMap<UtilityId, f64>,
        muni_acc: BTreeMap<MunicipalityId, MuniAcc>,
        src_acc: BTreeMap<SourceId, SourceAcc>,
        nrw_class: BTreeMap<MunicipalityId, String>,
    ) -> Result<(), EngineError> {
        let date0 = jan1(year);
        let mut opex: BTreeMap<UtilityId, f64> = BTreeMap::new();
        let mut fines: BTreeMap<UtilityId, f64> = BTreeMap::new();
        let mut revenue: BTreeMap<UtilityId, f64> = BTreeMap::new();
        let mut operational: BTreeMap<UtilityId, f64> = BTreeMap::new();

        for (id, a) in &src_acc {
            let s = &self.state.sources[id];
            let u = self.utility_of(&s.province);
            let fine = match (s.source_type, s.permit) {
                (SourceType::Groundwater, Some(permit)) => check_groundwater_permit(a.volume, permit, &self.inst.fines, pi),
                _ => 0.0,
            };
            *opex.entry(u.clone()).or_default() += a.cost.total() + a.energy_cost;
            *fines.entry(u.clone()).or_default() += fine;
            *operational.entry(u.clone()).or_default() += a.operational_t;
            self.out.source_years.push(SourceYear {
                year,
                source: id.clone(),
                utility: u,
                volume: a.volume,
                cost: a.cost,
                fine,
                grid_kwh: a.grid_kwh,
                energy_cost: a.energy_cost,
            });
        }

        let classes = &self.inst.household_classes;
        let weight_sum: f64 = classes.iter().map(|c| c.share * c.household_size).sum();
        for (id, a) in &muni_acc {
            let m = &self.state.municipalities[id].muni;
            let u = self.utility_of(&m.province);
            let t = self.inst.tariff(&u);
            let (fixed, vol) = (t.fixed_per_month * pi, t.volumetric * pi);
            *revenue.entry(u.clone()).or_default() +=
                crate::economy::tariff_revenue(m.houses, fixed, a.res_q + a.bus_q, vol);
            let income_index = self.trace.value("income_index", id.as_str(), year).unwrap_or(1.0);
            for c in classes {
                let share = if weight_sum > 0.0 { c.share * c.household_size / weight_sum } else { 0.0 };
                self.out.kpi_inputs.service.push(ServiceCell {
                    utility: u.clone(),
                    municipality: id.clone(),
                    class: c.id.clone(),
                    year,
                    demand: a.res_d * share,
                    undelivered: ((a.res_d - a.res_q) * share).max(0.0),
                });
                self.out.kpi_inputs.affordability.push(AffordabilityCell {
                    utility: u.clone(),
                    municipality: id.clone(),
                    class: c.id.clone(),
                    year,
                    volumetric: vol,
                    fixed,
                    lifeline: self.inst.economy.lifeline_per_person * c.household_size,
                    income: self.inst.economy.base_income * c.income_multiplier * income_index * pi,
                });
            }
            self.out.kpi_inputs.service.push(ServiceCell {
                utility: u.clone(),
                municipality: id.clone(),
                class: HouseholdClassId::new(OTHER_CLASS),
                year,
                demand: a.bus_d + a.nrw_d,
                undelivered: (a.bus_d - a.bus_q + a.nrw_d - a.nrw_q).max(0.0),
            });
            self.out.muni_years.push(MuniYear {
                year,
                municipality: id.clone(),
                utility: u,
                population: m.population,
                network_age: m.dist_net_avg_age,
                nrw_class: nrw_class.get(id).cloned().unwrap_or_default(),
                residential_demand: a.res_d,
                residential_delivered: a.res_q,
                business_demand: a.bus_d,
                business_delivered: a.bus_q,
                nrw_demand: a.nrw_d,
                nrw_delivered: a.nrw_q,
            });
        }

        // NRW renewal from the utility's share of its allocation
        let utilities: Vec<UtilityId> = self.state.utilities.iter().map(|u| u.id.clone()).collect();
        for u in &utilities {
            let Some((share, policy)) = self.nrw_setting(u, year) else { continue };
            let budget = share * allocated.get(u).copied().unwrap_or(0.0);
            let province = self.state.utilities.iter().find(|x| &x.id == u).map(|x| x.province.clone()).expect("listed");
            let ids: Vec<MunicipalityId> = self
                .state
                .open_municipalities()
                .filter(|m| m.muni.province == province)
                .map(|m| m.muni.id.clone())
                .collect();
            let targets: Vec<NrwTarget> = ids
                .iter()
                .map(|id| {
                    let m = &self.state.municipalities[id].muni;
                    NrwTarget {
                        id: id.clone(),
                        population: m.population,
                        age: m.dist_net_avg_age,
                        km: km_pipes_with_ratio(m.population, self.inst.nrw.km_per_10k),
                    }
                })
                .collect();
            let outcome = apply_nrw_intervention(&self.inst.nrw, &targets, budget, policy, pi)
                .map_err(|source| EngineError::Nrw { year, source })?;
            for (id, age) in ids.iter().zip(&outcome.ages) {
                self.state.municipalities.get_mut(id).expect("open").muni.dist_net_avg_age = *age;
            }
            if outcome.spent > 0.0 {
                let spent = outcome.spent;
                let ef = self.ef_per_eur();
                self.book(u.clone(), AssetKind::Nrw, format!("NRW renewal {u}"), year, spent, self.inst.economy.nrw_lifetime, spent * ef, false);
                self.event(NaiveDate::from_ymd_opt(year, 12, 31).expect("valid"), "nrw_renewal", format!("{u} {policy:?}"), spent);
            }
        }

        let demand = self.trace.national("investor_demand", year)?;
        let e = &self.inst.economy;
        let market = BondMarket { risk_free: e.risk_free, credit_spread: e.credit_spread, demand_sensitivity: e.demand_sensitivity, demand };
        let maturity = e.bond_maturity;
        for u in &utilities {
            let capex: f64 = self.state.assets.iter().filter(|a| &a.utility == u && a.year == year).map(|a| a.capex).sum();
            let flows = YearFlows {
                allocated: allocated.get(u).copied().unwrap_or(0.0),
                revenue: revenue.get(u).copied().unwrap_or(0.0),
                capex,
                opex: opex.get(u).copied().unwrap_or(0.0),
                fines: fines.get(u).copied().unwrap_or(0.0),
            };
            let fin = self.state.finance.entry(u.clone()).or_default();
            let ledger = fin.close_year(u, year, flows, &market, maturity);
            if ledger.bond_issued > 0.0 {
                self.out.events.push(EventRecord {
                    date: NaiveDate::from_ymd_opt(year, 12, 31).expect("valid"),
                    kind: "bond_issue".into(),
                    detail: format!("{u} coupon {}", fin.bonds.last().map_or(0.0, |b| b.coupon)),
                    cost: ledger.bond_issued,
                });
            }
            let alive = |a: &&CapitalAsset| &a.utility == u && a.year <= year && (year - a.year) < a.lifetime.ceil() as i32;
            let annualised: f64 = self.state.assets.iter().filter(alive).map(|a| a.capex / a.lifetime).sum();
            let embedded: f64 = self.state.assets.iter().filter(alive).map(|a| a.embedded / a.lifetime).sum();
            self.out.kpi_inputs.cost.push(CostCell {
                utility: u.clone(),
                year,
                annualised_capex: annualised,
                opex: flows.opex + flows.fines,
                interest: ledger.interest,
                embedded_t: embedded,
                operational_t: operational.get(u).copied().unwrap_or(0.0),
            });
            self.out.ledgers.push(ledger);
        }
        let _ = date0;
        Ok(())
    }
}
