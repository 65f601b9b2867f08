//! Masterplans: dated interventions and policy settings, with static validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{check_source_size, AssetError};
use crate::calendar::is_quarter_start;
use crate::domain::{SourceType, WorldState};
use crate::economy::AllocationRule;
use crate::ids::{ConnectionId, PipeOptionId, PumpOptionId, SourceId, StationId, UtilityId};
use crate::instance::Instance;
use crate::nrw::NrwPolicy;

pub const PLAN_FORMAT_VERSION: u32 = 1;
pub const MIN_HORIZON_YEARS: u32 = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Intervention {
    OpenSource {
        site: SourceId,
        source_type: SourceType,
        /// Nominal capacity, m³/day.
        size: f64,
        date: NaiveDate,
    },
    CloseSource {
        source: SourceId,
        date: NaiveDate,
    },
    InstallPipe {
        connection: ConnectionId,
        option: PipeOptionId,
        date: NaiveDate,
    },
    ReplacePipe {
        connection: ConnectionId,
        option: PipeOptionId,
        date: NaiveDate,
    },
    SetPumps {
        station: StationId,
        option: PumpOptionId,
        count: u32,
        date: NaiveDate,
    },
    InstallPv {
        station: StationId,
        capacity_kw: f64,
        date: NaiveDate,
    },
    /// Share of the utility's allocated budget spent on NRW renewal from `year` on.
    NrwBudget {
        utility: UtilityId,
        share: f64,
        policy: NrwPolicy,
        year: i32,
    },
    /// National allocation rule from `year` on.
    BudgetRule {
        rule: AllocationRule,
        year: i32,
    },
}

impl Intervention {
    /// First day the intervention takes effect.
    pub fn effective_date(&self) -> NaiveDate {
        match self {
            Intervention::OpenSource { date, .. }
            | Intervention::CloseSource { date, .. }
            | Intervention::InstallPipe { date, .. }
            | Intervention::ReplacePipe { date, .. }
            | Intervention::SetPumps { date, .. }
            | Intervention::InstallPv { date, .. } => *date,
            Intervention::NrwBudget { year, .. } | Intervention::BudgetRule { year, .. } => {
                NaiveDate::from_ymd_opt(*year, 1, 1).expect("valid year")
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Intervention::OpenSource { .. } => "open_source",
            Intervention::CloseSource { .. } => "close_source",
            Intervention::InstallPipe { .. } => "install_pipe",
            Intervention::ReplacePipe { .. } => "replace_pipe",
            Intervention::SetPumps { .. } => "set_pumps",
            Intervention::InstallPv { .. } => "install_pv",
            Intervention::NrwBudget { .. } => "nrw_budget",
            Intervention::BudgetRule { .. } => "budget_rule",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Masterplan {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    /// Utilities the plan speaks for; empty means all.
    #[serde(default)]
    pub utilities: Vec<UtilityId>,
    pub start_year: i32,
    pub horizon_years: u32,
    #[serde(default)]
    pub interventions: Vec<Intervention>,
}

impl Masterplan {
    pub fn empty(start_year: i32) -> Self {
        Self {
            format_version: PLAN_FORMAT_VERSION,
            name: "empty".into(),
            utilities: Vec::new(),
            start_year,
            horizon_years: MIN_HORIZON_YEARS,
            interventions: Vec::new(),
        }
    }

    pub fn end_year(&self) -> i32 {
        self.start_year + self.horizon_years as i32
    }

    /// Interventions in effective-date order; ties keep plan order.
    pub fn schedule(&self) -> Vec<(usize, &Intervention)> {
        let mut v: Vec<(usize, &Intervention)> = self.interventions.iter().enumerate().collect();
        v.sort_by_key(|(i, iv)| (iv.effective_date(), *i));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnsupportedVersion,
    ShortHorizon,
    DateOutsideHorizon,
    DateMisaligned,
    UnknownUtility,
    UnknownSite,
    SiteTypeMismatch,
    SiteAlreadyUsed,
    PermitRule,
    AboveMaximum,
    NonPositiveSize,
    UnknownSource,
    SourceAlreadyClosed,
    UnknownConnection,
    UnknownPipeOption,
    DuplicatePipe,
    NoPipeToReplace,
    UnknownStation,
    UnknownPumpOption,
    BadPumpCount,
    BadPvCapacity,
    BadShare,
    BadRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Index into `interventions`, when the violation belongs to one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = serde_json::to_value(self.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        match self.intervention {
            Some(i) => write!(f, "[{kind}] interventions[{i}]: {}", self.message),
            None => write!(f, "[{kind}] {}", self.message),
        }
    }
}

/// Check every static rule against the instance catalogues and the state
/// the plan starts from. Returns all violations, in intervention order.
pub fn validate_plan(plan: &Masterplan, instance: &Instance, state: &WorldState) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |kind: ViolationKind, at: Option<usize>, message: String| out.push(Violation { kind, intervention: at, message });
    if plan.format_version != PLAN_FORMAT_VERSION {
        v(ViolationKind::UnsupportedVersion, None, format!("unsupported plan version {}", plan.format_version));
    }
    if plan.horizon_years < MIN_HORIZON_YEARS {
        v(ViolationKind::ShortHorizon, None, format!("horizon {} years is below {MIN_HORIZON_YEARS}", plan.horizon_years));
    }
    if plan.start_year != state.year {
        v(ViolationKind::DateOutsideHorizon, None, format!("plan starts in {}, the stage starts in {}", plan.start_year, state.year));
    }
    let known_utility = |u: &UtilityId| state.utilities.iter().any(|x| &x.id == u);
    for u in &plan.utilities {
        if !known_utility(u) {
            v(ViolationKind::UnknownUtility, None, format!("unknown utility {u}"));
        }
    }

    let mut opened: BTreeSet<&SourceId> = BTreeSet::new();
    let mut closed: BTreeSet<&SourceId> = BTreeSet::new();
    let mut stations: BTreeSet<StationId> = state.stations.keys().cloned().collect();
    // connection -> dates on which a pipe is laid; existing pipes count from the start
    let mut laid: BTreeMap<&ConnectionId, Vec<NaiveDate>> = BTreeMap::new();
    for (id, c) in &state.connections {
        if let Some(p) = &c.installed_pipe {
            laid.entry(id).or_default().push(p.install_date);
        }
    }

    for (i, iv) in plan.schedule() {
        let at = Some(i);
        let date = iv.effective_date();
        if date.year() < plan.start_year || date.year() >= plan.end_year() {
            v(ViolationKind::DateOutsideHorizon, at, format!("{} on {date} lies outside {}..{}", iv.kind(), plan.start_year, plan.end_year()));
        } else if !is_quarter_start(date) {
            v(ViolationKind::DateMisaligned, at, format!("{date} is not the first day of a quarter"));
        }
        match iv {
            Intervention::OpenSource { site, source_type, size, .. } => {
                let Some(s) = instance.site(site) else {
                    v(ViolationKind::UnknownSite, at, format!("{site} is not an available site"));
                    continue;
                };
                if s.source_type != *source_type {
                    v(ViolationKind::SiteTypeMismatch, at, format!("site {site} takes {:?} sources", s.source_type));
                }
                if !opened.insert(site) || state.sources.contains_key(site) {
                    v(ViolationKind::SiteAlreadyUsed, at, format!("site {site} is already in use"));
                }
                match check_source_size(s.source_type, *size, s.permit, s.max_capacity) {
                    Ok(()) => {}
                    Err(e @ AssetError::PermitRule { .. }) => v(
                        ViolationKind::PermitRule,
                        at,
                        format!("{e}; groundwater capacity may exceed the permit by at most 30%"),
                    ),
                    Err(e @ AssetError::AboveMaximum { .. }) => v(ViolationKind::AboveMaximum, at, e.to_string()),
                    Err(e) => v(ViolationKind::NonPositiveSize, at, e.to_string()),
                }
                stations.insert(site_station(site));
            }
            Intervention::CloseSource { source, .. } => {
                let exists = state.sources.contains_key(source) || opened.contains(source);
                if !exists {
                    v(ViolationKind::UnknownSource, at, format!("unknown source {source}"));
                } else if !closed.insert(source) || state.sources.get(source).is_some_and(|s| s.closure_date.is_some_and(|c| c <= date)) {
                    v(ViolationKind::SourceAlreadyClosed, at, format!("source {source} is already closed; closed sources never reopen"));
                }
            }
            Intervention::InstallPipe { connection, option, date } | Intervention::ReplacePipe { connection, option, date } => {
                if instance.pipe_option(option).is_none() {
                    v(ViolationKind::UnknownPipeOption, at, format!("unknown pipe option {option}"));
                }
                let Some((key, _)) = state.connections.get_key_value(connection) else {
                    v(ViolationKind::UnknownConnection, at, format!("unknown connection {connection}"));
                    continue;
                };
                let entry = laid.entry(key).or_default();
                let has_pipe = entry.iter().any(|d| d <= date);
                if matches!(iv, Intervention::InstallPipe { .. }) {
                    if has_pipe || entry.contains(date) {
                        v(ViolationKind::DuplicatePipe, at, format!("connection {connection} already carries a pipe; duplicate pipes are not allowed"));
                    }
                } else if !has_pipe {
                    v(ViolationKind::NoPipeToReplace, at, format!("connection {connection} has no pipe to replace"));
                } else if entry.contains(date) {
                    v(ViolationKind::DuplicatePipe, at, format!("connection {connection} gets two pipes on {date}"));
                }
                entry.push(*date);
            }
            Intervention::SetPumps { station, option, count, .. } => {
                if !stations.contains(station) {
                    v(ViolationKind::UnknownStation, at, format!("unknown pumping station {station}"));
                }
                if instance.pump_option(option).is_none() {
                    v(ViolationKind::UnknownPumpOption, at, format!("unknown pump option {option}"));
                }
                if *count == 0 {
                    v(ViolationKind::BadPumpCount, at, "a station needs at least one pump".into());
                }
            }
            Intervention::InstallPv { station, capacity_kw, .. } => {
                if !stations.contains(station) {
                    v(ViolationKind::UnknownStation, at, format!("unknown pumping station {station}"));
                }
                if !(*capacity_kw > 0.0 && capacity_kw.is_finite()) {
                    v(ViolationKind::BadPvCapacity, at, format!("PV capacity must be positive, got {capacity_kw}"));
                }
            }
            Intervention::NrwBudget { utility, share, .. } => {
                if !known_utility(utility) {
                    v(ViolationKind::UnknownUtility, at, format!("unknown utility {utility}"));
                }
                if !(0.0..=1.0).contains(share) {
                    v(ViolationKind::BadShare, at, format!("NRW share must lie in [0, 1], got {share}"));
                }
            }
            Intervention::BudgetRule { rule, .. } => {
                if let AllocationRule::Custom(w) = rule {
                    let sum: f64 = w.iter().sum();
                    if w.len() != state.utilities.len() || (sum - 1.0).abs() > 1e-9 || w.iter().any(|x| *x < 0.0) {
                        v(ViolationKind::BadRule, at, "custom weights need one non-negative entry per utility, summing to 1".into());
                    }
                }
            }
        }
    }
    out
}

/// Station created with a new source.
#[derive(Debug, Error)]
pub enum PlanError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
}

pub fn parse_plan(text: &str, path: &str) -> Result<Masterplan, PlanError> {
    serde_json::from_str(text).map_err(|e| PlanError::Parse {
        path: path.to_owned(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_plan(path: &Path) -> Result<Masterplan, PlanError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| PlanError::Io { path: shown.clone(), source })?;
    parse_plan(&text, &shown)
}

pub fn site_station(site: &SourceId) -> StationId {
    StationId::new(format!("PS-{site}"))
}
