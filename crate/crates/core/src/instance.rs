//! The instance document: every entity, catalogue and parameter of a
//! regional system, with load-time validation and canonical export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{
    check_source_size, uniform_years, FineSchedule, PipeOption, PumpOption, SourceCostEntry, SourceSizeClass,
    SourceTypeParams,
};
use crate::calendar::is_jan1;
use crate::demand::Phase3Params;
use crate::domain::{
    Connection, EndDisposition, LifecycleEvent, Municipality, MunicipalityState, MunicipalityStatus, PipeState,
    PumpUnit, PumpingStation, SizeClass, SourceType, StationState, WaterSource, WaterUtility, WorldState,
};
use crate::economy::{AllocationRule, UtilityFinance};
use crate::hydraulics::SolverOptions;
use crate::ids::{HouseholdClassId, MunicipalityId, ProvinceId, PumpOptionId, SourceId, UtilityId};
use crate::nrw::{NrwClass, NrwParams};
use crate::scenario::{self, DatedEvent, DriverSpec, ScenarioError, ScenarioTrace, TraceScopes};

pub const INSTANCE_FORMAT_VERSION: u32 = 1;

/// A location where a new source may be opened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSite {
    pub id: SourceId,
    pub source_type: SourceType,
    pub latitude: f64,
    pub longitude: f64,
    pub elevation: f64,
    pub province: ProvinceId,
    pub connected_municipality: MunicipalityId,
    /// m³/year, groundwater only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permit: Option<f64>,
    /// m³/day, surface and desalination only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_capacity: Option<f64>,
    /// Pumps fitted when the source is built.
    pub pump_option: PumpOptionId,
    pub pump_count: u32,
}

/// An income band of households, applied in every municipality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseholdClass {
    pub id: HouseholdClassId,
    /// Fraction of households in the class.
    pub share: f64,
    /// Monthly income relative to the national base income.
    pub income_multiplier: f64,
    /// persons
    pub household_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffEntry {
    pub utility: UtilityId,
    /// €/month/household, base year
    pub fixed_per_month: f64,
    /// €/m³, base year
    pub volumetric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomicParams {
    /// €/year, base year
    pub national_budget: f64,
    #[serde(default = "default_rule")]
    pub budget_rule: AllocationRule,
    #[serde(default = "default_maturity")]
    pub bond_maturity: u32,
    pub risk_free: f64,
    pub credit_spread: f64,
    pub demand_sensitivity: f64,
    pub tariffs: Vec<TariffEntry>,
    /// Monthly household income at index 1, base year.
    pub base_income: f64,
    /// Relative hourly electricity price pattern; normalised to mean one on use.
    pub price_shape: [f64; 24],
    /// tCO2eq per € of capex for assets without a per-metre factor.
    pub embedded_ef_per_eur: f64,
    /// Annualisation lifetime of NRW renewal spending, years.
    #[serde(default = "default_nrw_lifetime")]
    pub nrw_lifetime: f64,
    /// m³/person/month
    #[serde(default = "default_lifeline")]
    pub lifeline_per_person: f64,
}

fn default_rule() -> AllocationRule {
    AllocationRule::PerCapita
}

fn default_maturity() -> u32 {
    20
}

fn default_nrw_lifetime() -> f64 {
    30.0
}

fn default_lifeline() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandParams {
    /// L/household/day at driver index 1
    pub per_household: f64,
    /// L/business/day at driver index 1
    pub per_business: f64,
    /// National calibration target, L/person/day of billable water.
    pub national_target_lpcd: f64,
    /// Lognormal spread of raw municipal volumes before calibration.
    pub volume_sigma: f64,
    #[serde(default = "default_profiles")]
    pub profiles_per_class: usize,
    #[serde(default)]
    pub phase3: Phase3Params,
}

fn default_profiles() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub format_version: u32,
    pub name: String,
    pub start_year: i32,
    pub utilities: Vec<WaterUtility>,
    pub municipalities: Vec<Municipality>,
    pub sources: Vec<WaterSource>,
    pub stations: Vec<PumpingStation>,
    pub connections: Vec<Connection>,
    pub sites: Vec<SourceSite>,
    pub pump_options: Vec<PumpOption>,
    pub pipe_options: Vec<PipeOption>,
    pub source_types: Vec<SourceTypeParams>,
    pub source_costs: Vec<SourceCostEntry>,
    pub fines: FineSchedule,
    pub nrw: NrwParams,
    pub household_classes: Vec<HouseholdClass>,
    pub economy: EconomicParams,
    pub demand: DemandParams,
    pub drivers: Vec<DriverSpec>,
    #[serde(default)]
    pub solver: SolverOptions,
}

/// One validation finding, located by a path into the document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{} invalid entries:\n{}", .0.len(), .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Issue>),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Parse and validate a JSON instance document.
pub fn parse_instance(text: &str, path: &str) -> Result<Instance, InstanceError> {
    let inst: Instance = serde_json::from_str(text).map_err(|e| InstanceError::Parse {
        path: path.to_owned(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let issues = inst.validate();
    if issues.is_empty() {
        Ok(inst)
    } else {
        Err(InstanceError::Invalid(issues))
    }
}

pub fn load_instance(path: &Path) -> Result<Instance, InstanceError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| InstanceError::Io { path: shown.clone(), source })?;
    parse_instance(&text, &shown)
}

struct Checker {
    issues: Vec<Issue>,
}

impl Checker {
    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue { location: location.into(), message: message.into() });
    }

    fn unique<'a>(&mut self, block: &str, ids: impl Iterator<Item = &'a str>) -> BTreeSet<&'a str> {
        let mut seen = BTreeSet::new();
        for (i, id) in ids.enumerate() {
            if !seen.insert(id) {
                self.push(format!("{block}[{i}].id"), format!("duplicate id {id}"));
            }
        }
        seen
    }

    fn jan1(&mut self, location: String, date: NaiveDate) {
        if !is_jan1(date) {
            self.push(location, format!("{date} is not a January 1st"));
        }
    }

    fn non_negative(&mut self, location: String, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.push(location, format!("must be a finite value >= 0, got {v}"));
        }
    }
}

impl Instance {
    /// All load-time rule violations; empty when the document is valid.
    pub fn validate(&self) -> Vec<Issue> {
        let mut c = Checker { issues: Vec::new() };
        if self.format_version != INSTANCE_FORMAT_VERSION {
            c.push("format_version", format!("unsupported version {}, expected {INSTANCE_FORMAT_VERSION}", self.format_version));
        }
        c.unique("utilities", self.utilities.iter().map(|u| u.id.as_str()));
        let mut provinces = BTreeSet::new();
        for (i, u) in self.utilities.iter().enumerate() {
            if !provinces.insert(&u.province) {
                c.push(format!("utilities[{i}].province"), format!("province {} already has a utility", u.province));
            }
        }
        let munis = c.unique("municipalities", self.municipalities.iter().map(|m| m.id.as_str()));
        let pumps = c.unique("pump_options", self.pump_options.iter().map(|p| p.id.as_str()));
        c.unique("pipe_options", self.pipe_options.iter().map(|p| p.id.as_str()));
        c.unique("stations", self.stations.iter().map(|s| s.id.as_str()));
        c.unique("connections", self.connections.iter().map(|s| s.id.as_str()));
        c.unique("household_classes", self.household_classes.iter().map(|h| h.id.as_str()));
        let sources = c.unique("sources", self.sources.iter().map(|s| s.id.as_str()));
        c.unique("sites", self.sites.iter().map(|s| s.id.as_str()));

        for (i, m) in self.municipalities.iter().enumerate() {
            let at = |f: &str| format!("municipalities[{i}].{f}");
            if !provinces.contains(&m.province) {
                c.push(at("province"), format!("no utility serves province {}", m.province));
            }
            c.jan1(at("begin_date"), m.begin_date);
            if let Some(end) = m.end_date {
                c.jan1(at("end_date"), end);
                if end <= m.begin_date {
                    c.push(at("end_date"), "must be after begin_date");
                }
            }
            match (&m.end_date, &m.end_disposition) {
                (Some(_), None) => c.push(at("end_disposition"), "an ending municipality needs a disposition"),
                (None, Some(_)) => c.push(at("end_date"), "a disposition needs an end date"),
                _ => {}
            }
            if let Some(EndDisposition::AbsorbedInto(t) | EndDisposition::ClusteredInto(t)) = &m.end_disposition {
                if !munis.contains(t.as_str()) || t == &m.id {
                    c.push(at("end_disposition"), format!("unknown or self target municipality {t}"));
                }
            }
            if let Some(EndDisposition::ClusteredInto(t)) = &m.end_disposition {
                if let Some(target) = self.municipalities.iter().find(|x| &x.id == t) {
                    if Some(target.begin_date) != m.end_date {
                        c.push(at("end_date"), format!("must equal the begin date of cluster {t}"));
                    }
                }
            }
            for (f, v) in [
                ("population", m.population),
                ("surface_land", m.surface_land),
                ("houses", m.houses),
                ("businesses", m.businesses),
                ("dist_net_length", m.dist_net_length),
                ("dist_net_avg_age", m.dist_net_avg_age),
            ] {
                c.non_negative(at(f), v);
            }
        }

        for (i, s) in self.sources.iter().enumerate() {
            let at = |f: &str| format!("sources[{i}].{f}");
            if !munis.contains(s.connected_municipality.as_str()) {
                c.push(at("connected_municipality"), format!("unknown municipality {}", s.connected_municipality));
            }
            if !provinces.contains(&s.province) {
                c.push(at("province"), format!("no utility serves province {}", s.province));
            }
            if s.source_type == SourceType::Groundwater && !s.permit.is_some_and(|p| p > 0.0) {
                c.push(at("permit"), "groundwater sources need a positive permit");
            }
            if let Err(e) = check_source_size(s.source_type, s.nominal_capacity, s.permit, s.max_capacity) {
                c.push(at("nominal_capacity"), e.to_string());
            }
            if !(0.0..=1.0).contains(&s.target_factor) {
                c.push(at("target_factor"), "must lie in [0, 1]");
            }
            if s.closure_date.is_some_and(|d| d <= s.activation_date) {
                c.push(at("closure_date"), "must be after activation_date");
            }
        }

        for (i, s) in self.sites.iter().enumerate() {
            let at = |f: &str| format!("sites[{i}].{f}");
            if sources.contains(s.id.as_str()) {
                c.push(at("id"), format!("site id {} clashes with an existing source", s.id));
            }
            if !munis.contains(s.connected_municipality.as_str()) {
                c.push(at("connected_municipality"), format!("unknown municipality {}", s.connected_municipality));
            }
            if !provinces.contains(&s.province) {
                c.push(at("province"), format!("no utility serves province {}", s.province));
            }
            match s.source_type {
                SourceType::Groundwater if !s.permit.is_some_and(|p| p > 0.0) => {
                    c.push(at("permit"), "groundwater sites need a positive permit")
                }
                SourceType::Surface | SourceType::Desalination if !s.max_capacity.is_some_and(|p| p > 0.0) => {
                    c.push(at("max_capacity"), "surface and desalination sites need a positive maximum capacity")
                }
                _ => {}
            }
            if !pumps.contains(s.pump_option.as_str()) {
                c.push(at("pump_option"), format!("unknown pump option {}", s.pump_option));
            }
            if s.pump_count == 0 {
                c.push(at("pump_count"), "needs at least one pump");
            }
        }

        for (i, st) in self.stations.iter().enumerate() {
            let at = |f: &str| format!("stations[{i}].{f}");
            if !sources.contains(st.source_id.as_str()) {
                c.push(at("source_id"), format!("unknown source {}", st.source_id));
            }
            if !pumps.contains(st.pump_option.as_str()) {
                c.push(at("pump_option"), format!("unknown pump option {}", st.pump_option));
            }
            if st.pump_count == 0 {
                c.push(at("pump_count"), "needs at least one pump");
            }
            if st.pump_install_dates.len() != st.pump_count as usize {
                c.push(at("pump_install_dates"), "needs one date per pump");
            }
        }
        let mut with_station = BTreeSet::new();
        for st in &self.stations {
            with_station.insert(st.source_id.as_str());
        }
        for (i, s) in self.sources.iter().enumerate() {
            if !with_station.contains(s.id.as_str()) {
                c.push(format!("sources[{i}]"), format!("source {} has no pumping station", s.id));
            }
        }

        for (i, cn) in self.connections.iter().enumerate() {
            let at = |f: &str| format!("connections[{i}].{f}");
            for (f, n) in [("node_a", &cn.node_a), ("node_b", &cn.node_b)] {
                if !munis.contains(n.as_str()) {
                    c.push(at(f), format!("unknown municipality {n}"));
                }
            }
            if cn.node_a == cn.node_b {
                c.push(at("node_b"), "a connection needs two distinct ends");
            }
            if !(cn.distance > 0.0) {
                c.push(at("distance"), "must be positive");
            }
            if cn.minor_loss != 0.0 {
                c.push(at("minor_loss"), "minor losses are fixed at 0");
            }
            if let Some(p) = &cn.installed_pipe {
                match self.pipe_options.iter().find(|o| o.id == p.option_id) {
                    None => c.push(at("installed_pipe.option_id"), format!("unknown pipe option {}", p.option_id)),
                    Some(o) if p.current_friction < o.f_new => {
                        c.push(at("installed_pipe.current_friction"), "below the option's new-pipe friction")
                    }
                    _ => {}
                }
            }
        }

        for (i, p) in self.pump_options.iter().enumerate() {
            if let Err(e) = p.curve.validate() {
                c.push(format!("pump_options[{i}].curve"), e.to_string());
            }
            if p.lifetime[0] == 0 || p.lifetime[0] > p.lifetime[1] {
                c.push(format!("pump_options[{i}].lifetime"), "bounds must satisfy 1 <= min <= max");
            }
            c.non_negative(format!("pump_options[{i}].unit_cost"), p.unit_cost);
        }
        for (i, p) in self.pipe_options.iter().enumerate() {
            let at = |f: &str| format!("pipe_options[{i}].{f}");
            if !(p.f_new > 0.0) {
                c.push(at("f_new"), "must be positive");
            }
            if !(p.decay_rate[0] >= 0.0 && p.decay_rate[0] <= p.decay_rate[1]) {
                c.push(at("decay_rate"), "bounds must satisfy 0 <= min <= max");
            }
            if !(p.diameter > 0.0) {
                c.push(at("diameter"), "must be positive");
            }
            if !(p.lifetime > 0.0) {
                c.push(at("lifetime"), "must be positive");
            }
            c.non_negative(at("cost_per_m"), p.cost_per_m);
            c.non_negative(at("emissions_per_m"), p.emissions_per_m);
        }
        for t in [SourceType::Groundwater, SourceType::Surface, SourceType::Desalination] {
            match self.source_types.iter().position(|p| p.source_type == t) {
                None => c.push("source_types", format!("missing parameters for {t:?}")),
                Some(i) => {
                    let p = &self.source_types[i];
                    if p.over_target_multiplier < 1.0 {
                        c.push(format!("source_types[{i}].over_target_multiplier"), "must be >= 1");
                    }
                    if p.construction_years[0] > p.construction_years[1] {
                        c.push(format!("source_types[{i}].construction_years"), "min above max");
                    }
                }
            }
        }
        for k in [SourceSizeClass::Small, SourceSizeClass::Medium, SourceSizeClass::Large] {
            match self.source_costs.iter().position(|e| e.size_class == k) {
                None => c.push("source_costs", format!("missing cost entry for {k:?} sources")),
                Some(i) => {
                    let e = &self.source_costs[i];
                    for (f, v) in [
                        ("fixed", e.fixed),
                        ("energy_intensity", e.energy_intensity),
                        ("non_energy", e.non_energy),
                        ("construction_unit_cost", e.construction_unit_cost),
                    ] {
                        c.non_negative(format!("source_costs[{i}].{f}"), v);
                    }
                    if !(e.lifetime > 0.0) {
                        c.push(format!("source_costs[{i}].lifetime"), "must be positive");
                    }
                }
            }
        }
        if self.fines.bands.is_empty() {
            c.push("fines.bands", "needs at least one band");
        }
        if let Err(e) = self.nrw.table.validate() {
            c.push("nrw.table", e.to_string());
        }
        for class in NrwClass::ALL {
            for size in [SizeClass::Small, SizeClass::Medium, SizeClass::Large] {
                if self.nrw.cost(class, size).is_err() {
                    c.push("nrw.costs", format!("missing entry for class {class:?}, size {size:?}"));
                }
            }
        }
        if self.household_classes.is_empty() {
            c.push("household_classes", "needs at least one class");
        }
        let share: f64 = self.household_classes.iter().map(|h| h.share).sum();
        if (share - 1.0).abs() > 1e-9 {
            c.push("household_classes", format!("shares sum to {share}, expected 1"));
        }
        for (i, h) in self.household_classes.iter().enumerate() {
            if !(h.income_multiplier > 0.0 && h.household_size > 0.0 && h.share >= 0.0) {
                c.push(format!("household_classes[{i}]"), "income multiplier and size must be positive");
            }
        }
        for u in &self.utilities {
            if !self.economy.tariffs.iter().any(|t| t.utility == u.id) {
                c.push("economy.tariffs", format!("no tariff for utility {}", u.id));
            }
        }
        if self.economy.bond_maturity == 0 {
            c.push("economy.bond_maturity", "must be at least one year");
        }
        if !(self.economy.base_income > 0.0) {
            c.push("economy.base_income", "must be positive");
        }
        if self.economy.price_shape.iter().any(|v| !(*v >= 0.0)) || self.economy.price_shape.iter().sum::<f64>() <= 0.0 {
            c.push("economy.price_shape", "needs non-negative values with a positive sum");
        }
        if let AllocationRule::Custom(w) = &self.economy.budget_rule {
            if w.len() != self.utilities.len() {
                c.push("economy.budget_rule", "custom weights need one entry per utility");
            }
        }
        let missing: Vec<&str> = scenario::REQUIRED_DRIVERS
            .iter()
            .copied()
            .filter(|d| !self.drivers.iter().any(|s| s.driver == *d))
            .collect();
        if !missing.is_empty() {
            c.push("drivers", format!("missing driver specs: {}", missing.join(", ")));
        }
        if !(self.demand.national_target_lpcd > 0.0) {
            c.push("demand.national_target_lpcd", "must be positive");
        }
        if self.demand.profiles_per_class < 2 {
            c.push("demand.profiles_per_class", "needs at least two profiles per class");
        }
        c.issues
    }

    /// Canonical JSON: fields in declaration order, two-space indentation,
    /// shortest round-trip number formatting.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("instance serialises");
        s.push('\n');
        s
    }

    pub fn start_date(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.start_year, 1, 1).expect("valid year")
    }

    pub fn pump_option(&self, id: &PumpOptionId) -> Option<&PumpOption> {
        self.pump_options.iter().find(|p| &p.id == id)
    }

    pub fn pipe_option(&self, id: &crate::ids::PipeOptionId) -> Option<&PipeOption> {
        self.pipe_options.iter().find(|p| &p.id == id)
    }

    pub fn site(&self, id: &SourceId) -> Option<&SourceSite> {
        self.sites.iter().find(|s| &s.id == id)
    }

    pub fn source_type_params(&self, t: SourceType) -> &SourceTypeParams {
        self.source_types.iter().find(|p| p.source_type == t).expect("validated")
    }

    pub fn source_cost(&self, k: SourceSizeClass) -> &SourceCostEntry {
        self.source_costs.iter().find(|e| e.size_class == k).expect("validated")
    }

    pub fn tariff(&self, u: &UtilityId) -> &TariffEntry {
        self.economy.tariffs.iter().find(|t| &t.utility == u).expect("validated")
    }

    /// Lifecycle events implied by end dispositions, ordered by date then id.
    pub fn lifecycle_events(&self) -> Vec<DatedEvent> {
        let mut absorbs = Vec::new();
        let mut clusters: BTreeMap<(NaiveDate, MunicipalityId), Vec<MunicipalityId>> = BTreeMap::new();
        for m in &self.municipalities {
            let Some(date) = m.end_date else { continue };
            match &m.end_disposition {
                Some(EndDisposition::AbsorbedInto(dst)) => {
                    absorbs.push(DatedEvent { date, event: LifecycleEvent::Absorb { src: m.id.clone(), dst: dst.clone() } })
                }
                Some(EndDisposition::ClusteredInto(new)) => clusters.entry((date, new.clone())).or_default().push(m.id.clone()),
                None => {}
            }
        }
        let mut events: Vec<DatedEvent> = clusters
            .into_iter()
            .map(|((date, new), srcs)| DatedEvent { date, event: LifecycleEvent::Cluster { srcs, new } })
            .chain(absorbs)
            .collect();
        events.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| format!("{:?}", a.event).cmp(&format!("{:?}", b.event))));
        events
    }

    pub fn cluster_targets(&self) -> BTreeSet<MunicipalityId> {
        self.municipalities
            .iter()
            .filter_map(|m| match &m.end_disposition {
                Some(EndDisposition::ClusteredInto(t)) => Some(t.clone()),
                _ => None,
            })
            .collect()
    }

    /// Keys of the uncertain parameters known up front: construction times
    /// of every site, lifetimes of existing pumps, decay of existing pipes.
    pub fn realized_keys(&self) -> Vec<(String, String)> {
        let mut keys: Vec<(String, String)> =
            self.sites.iter().map(|s| ("construction".to_owned(), s.id.to_string())).collect();
        for st in &self.stations {
            for k in 1..=st.pump_count {
                keys.push(("pump_lifetime".to_owned(), format!("{}/{k}", st.id)));
            }
        }
        for cn in self.connections.iter().filter(|c| c.installed_pipe.is_some()) {
            keys.push(("pipe_decay".to_owned(), format!("{}/0", cn.id)));
        }
        keys
    }

    /// Realise all drivers for `horizon_years` from the start year.
    pub fn trace(&self, master_seed: u64, horizon_years: u32) -> Result<ScenarioTrace, InstanceError> {
        let scopes = TraceScopes {
            municipalities: self.municipalities.iter().map(|m| m.id.to_string()).collect(),
            surface_sources: self
                .sources
                .iter()
                .filter(|s| s.source_type == SourceType::Surface)
                .map(|s| s.id.to_string())
                .chain(self.sites.iter().filter(|s| s.source_type == SourceType::Surface).map(|s| s.id.to_string()))
                .collect(),
        };
        Ok(scenario::generate_trace(
            &self.drivers,
            &scopes,
            self.lifecycle_events(),
            &self.realized_keys(),
            master_seed,
            self.start_year,
            horizon_years,
            1,
        )?)
    }

    /// World at the start of the first simulated year.
    pub fn initial_state(&self, trace: &ScenarioTrace) -> WorldState {
        let start = self.start_date();
        let municipalities = self
            .municipalities
            .iter()
            .map(|m| {
                let open = m.begin_date <= start && m.end_date.is_none_or(|e| start < e);
                let status = if open {
                    MunicipalityStatus::Open
                } else if m.end_date.is_some_and(|e| e <= start) {
                    MunicipalityStatus::Closed
                } else {
                    MunicipalityStatus::Pending
                };
                (m.id.clone(), MunicipalityState { muni: m.clone(), status, status_changed: None })
            })
            .collect();
        let stations = self
            .stations
            .iter()
            .map(|st| {
                let option = self.pump_option(&st.pump_option).expect("validated");
                let units = st
                    .pump_install_dates
                    .iter()
                    .enumerate()
                    .map(|(k, d)| PumpUnit {
                        install_year: d.year(),
                        lifetime_years: uniform_years(option.lifetime, trace.realize("pump_lifetime", &format!("{}/{}", st.id, k + 1))),
                    })
                    .collect();
                (st.id.clone(), StationState { station: st.clone(), units, installs: st.pump_count })
            })
            .collect();
        let pipes = self
            .connections
            .iter()
            .filter_map(|cn| {
                let p = cn.installed_pipe.as_ref()?;
                let option = self.pipe_option(&p.option_id)?;
                let u = trace.realize("pipe_decay", &format!("{}/0", cn.id));
                let rate = option.decay_rate[0] + u * (option.decay_rate[1] - option.decay_rate[0]);
                Some((cn.id.clone(), PipeState { decay_rate: rate, f_new: option.f_new }))
            })
            .collect();
        WorldState {
            start_year: self.start_year,
            year: self.start_year,
            utilities: self.utilities.clone(),
            municipalities,
            aliases: BTreeMap::new(),
            sources: self.sources.iter().map(|s| (s.id.clone(), s.clone())).collect(),
            stations,
            connections: self.connections.iter().map(|c| (c.id.clone(), c.clone())).collect(),
            pipes,
            finance: self.utilities.iter().map(|u| (u.id.clone(), UtilityFinance::default())).collect(),
            assets: Vec::new(),
        }
    }

    /// Short description for listings and the service.
    pub fn summary(&self) -> InstanceSummary {
        InstanceSummary {
            name: self.name.clone(),
            format_version: self.format_version,
            start_year: self.start_year,
            utilities: self.utilities.len(),
            municipalities: self.municipalities.len(),
            sources: self.sources.len(),
            sites: self.sites.len(),
            connections: self.connections.len(),
            installed_pipes: self.connections.iter().filter(|c| c.installed_pipe.is_some()).count(),
            population: self
                .municipalities
                .iter()
                .filter(|m| m.begin_date <= self.start_date())
                .map(|m| m.population)
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub name: String,
    pub format_version: u32,
    pub start_year: i32,
    pub utilities: usize,
    pub municipalities: usize,
    pub sources: usize,
    pub sites: usize,
    pub connections: usize,
    pub installed_pipes: usize,
    pub population: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{demo_instance, DEMO_JSON};

    #[test]
    fn canonical_round_trip() {
        let inst = demo_instance();
        let again = parse_instance(&inst.to_canonical_json(), "again.json").unwrap();
        assert_eq!(inst, again);
        assert_eq!(inst.to_canonical_json(), DEMO_JSON);
    }

    #[test]
    fn dangling_reference_is_located() {
        let mut v: serde_json::Value = serde_json::from_str(DEMO_JSON).unwrap();
        v["connections"][0]["node_a"] = "M99".into();
        let err = parse_instance(&v.to_string(), "x.json").unwrap_err();
        let InstanceError::Invalid(issues) = err else { panic!("{err}") };
        assert!(issues.iter().any(|i| i.location.starts_with("connections[0]") && i.message.contains("M99")), "{issues:?}");
    }

    #[test]
    fn oversized_groundwater_source_is_rejected_on_load() {
        let mut v: serde_json::Value = serde_json::from_str(DEMO_JSON).unwrap();
        let k = v["sources"].as_array().unwrap().iter().position(|s| s["source_type"] == "groundwater").unwrap();
        let permit = v["sources"][k]["permit"].as_f64().unwrap();
        v["sources"][k]["nominal_capacity"] = (1.4 * permit / 365.0).into();
        let InstanceError::Invalid(issues) = parse_instance(&v.to_string(), "x.json").unwrap_err() else { panic!() };
        assert_eq!(issues.len(), 1, "{issues:?}");
        assert!(issues[0].location.starts_with(&format!("sources[{k}]")));
    }

    #[test]
    fn unknown_fields_and_syntax_errors_carry_positions() {
        let err = parse_instance("{\n  \"format_version\": 1,\n  \"bogus\": 2\n}", "bad.json").unwrap_err();
        let InstanceError::Parse { line, .. } = err else { panic!("{err}") };
        assert!(line >= 2);
    }

    #[test]
    fn missing_driver_is_reported() {
        let mut inst = demo_instance();
        inst.drivers.retain(|d| d.driver != "pv_cost");
        assert!(inst.validate().iter().any(|i| i.message.contains("pv_cost")));
    }

    #[test]
    fn initial_state_matches_instance() {
        let inst = demo_instance();
        let trace = inst.trace(3, 25).unwrap();
        let state = inst.initial_state(&trace);
        assert_eq!(state.year, inst.start_year);
        assert_eq!(state.sources.len(), inst.sources.len());
        assert_eq!(state.stations.len(), inst.stations.len());
        for st in state.stations.values() {
            assert_eq!(st.units.len(), st.station.pump_count as usize);
        }
    }
}
