//! Seeded realisation of every exogenous and uncertain driver.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::DAYS_PER_YEAR;
use crate::domain::LifecycleEvent;
use crate::seed;

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Drivers every instance must specify.
pub const REQUIRED_DRIVERS: [&str; 11] = [
    "population",
    "income_index",
    "per_household_demand",
    "per_business_demand",
    "max_temperature",
    "electricity_price",
    "emission_factor",
    "pv_cost",
    "inflation",
    "investor_demand",
    "availability",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("missing driver specs: {}", .0.join(", "))]
    MissingDrivers(Vec<String>),
    #[error("horizon must be at least {min} years, got {got}")]
    ShortHorizon { got: u32, min: u32 },
    #[error("driver {driver}: {reason}")]
    BadSpec { driver: String, reason: String },
    #[error("trace has no {driver} series for {scope}")]
    MissingSeries { driver: String, scope: String },
    #[error("year {year} outside the trace ({start}..{end})")]
    OutOfHorizon { year: i32, start: i32, end: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    National,
    /// One path per municipality, including ones that open later.
    Municipality,
    /// One path per surface-water source or site.
    SurfaceSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Random walk of the relative deviation, reflected at the band.
    BoundedWalk,
    /// AR(1) relative deviation with persistence `persistence`.
    MeanReverting,
    /// AR(1) in log space around the mean path.
    Ar1Lognormal,
    /// Daily 0/1 Markov chain of low-flow spells.
    SampledEvent,
}

/// Seasonal low-flow model for availability: the daily chance of entering a
/// spell peaks at `peak_day`; spells last `mean_spell` days on average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventParams {
    pub base_probability: f64,
    pub seasonal_amplitude: f64,
    pub peak_day: f64,
    pub mean_spell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSpec {
    pub driver: String,
    pub scope: ScopeKind,
    pub kind: GeneratorKind,
    /// Mean path: `start * (1 + growth)^t`, or `start + growth * t` when `additive`.
    pub start: f64,
    #[serde(default)]
    pub growth: f64,
    #[serde(default)]
    pub additive: bool,
    /// Relative lower and upper deviation from the mean path, e.g. [-0.1, 0.1].
    #[serde(default)]
    pub band: [f64; 2],
    #[serde(default)]
    pub volatility: f64,
    #[serde(default)]
    pub persistence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<EventParams>,
    /// Per-scope multipliers of `start`, e.g. regional income levels.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scale: BTreeMap<String, f64>,
}

impl DriverSpec {
    pub fn mean(&self, t: usize) -> f64 {
        if self.additive {
            self.start + self.growth * t as f64
        } else {
            self.start * (1.0 + self.growth).powi(t as i32)
        }
    }

    /// Lower and upper bounds of the path at year offset `t`.
    pub fn bounds(&self, t: usize, scale: f64) -> (f64, f64) {
        let m = self.mean(t) * scale;
        let a = m * (1.0 + self.band[0]);
        let b = m * (1.0 + self.band[1]);
        (a.min(b), a.max(b))
    }

    fn check(&self) -> Result<(), ScenarioError> {
        let bad = |reason: &str| ScenarioError::BadSpec { driver: self.driver.clone(), reason: reason.to_owned() };
        if self.band[0] > self.band[1] {
            return Err(bad("band lower edge above upper edge"));
        }
        if self.band[0] < -1.0 {
            return Err(bad("band lower edge below -100%"));
        }
        if self.volatility < 0.0 || self.persistence.abs() >= 1.0 {
            return Err(bad("volatility must be >= 0 and |persistence| < 1"));
        }
        if self.kind == GeneratorKind::SampledEvent && self.event.is_none() {
            return Err(bad("sampled-event drivers need event parameters"));
        }
        Ok(())
    }
}

fn reflect(mut r: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    for _ in 0..64 {
        if r > hi {
            r = 2.0 * hi - r;
        } else if r < lo {
            r = 2.0 * lo - r;
        } else {
            return r;
        }
    }
    r.clamp(lo, hi)
}

/// Yearly path for one scope. Deviations are drawn sequentially, so a
/// longer horizon extends a shorter one without changing it.
pub fn generate_path<R: Rng + ?Sized>(spec: &DriverSpec, scale: f64, years: usize, rng: &mut R) -> Vec<f64> {
    let [lo, hi] = spec.band;
    let mut out = Vec::with_capacity(years);
    let mut r = 0.0f64.clamp(lo, hi);
    let (llo, lhi) = ((1.0 + lo).max(1e-12).ln(), (1.0 + hi).max(1e-12).ln());
    if spec.kind == GeneratorKind::Ar1Lognormal {
        r = 0.0f64.clamp(llo, lhi);
    }
    for t in 0..years {
        let z: f64 = StandardNormal.sample(rng);
        if t > 0 {
            r = match spec.kind {
                GeneratorKind::BoundedWalk => reflect(r + spec.volatility * z, lo, hi),
                GeneratorKind::MeanReverting => reflect(spec.persistence * r + spec.volatility * z, lo, hi),
                GeneratorKind::Ar1Lognormal => reflect(spec.persistence * r + spec.volatility * z, llo, lhi),
                GeneratorKind::SampledEvent => 0.0,
            };
        }
        let m = spec.mean(t) * scale;
        let v = match spec.kind {
            GeneratorKind::Ar1Lognormal => m * r.exp(),
            _ => m * (1.0 + r),
        };
        // keep rounding inside the declared band
        let (a, b) = spec.bounds(t, scale);
        out.push(v.clamp(a, b));
    }
    out
}

/// Daily availability (1 = available) over `days` days.
pub fn generate_availability<R: Rng + ?Sized>(event: &EventParams, days: usize, rng: &mut R) -> Vec<u8> {
    let leave = 1.0 / event.mean_spell.max(1.0);
    let mut low = false;
    (0..days)
        .map(|d| {
            let doy = (d % DAYS_PER_YEAR) as f64;
            let season = (2.0 * PI * (doy - event.peak_day) / DAYS_PER_YEAR as f64).cos();
            let enter = (event.base_probability * (1.0 + event.seasonal_amplitude * season)).clamp(0.0, 1.0);
            let u: f64 = rng.random();
            low = if low { u >= leave } else { u < enter };
            u8::from(!low)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatedEvent {
    pub date: NaiveDate,
    pub event: LifecycleEvent,
}

/// Scopes for which drivers are realised.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceScopes {
    pub municipalities: Vec<String>,
    pub surface_sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTrace {
    pub format_version: u32,
    pub master_seed: u64,
    pub start_year: i32,
    pub horizon_years: u32,
    /// driver -> scope -> yearly values (national scope is `"national"`).
    pub series: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// source -> daily availability over the horizon.
    pub availability: BTreeMap<String, Vec<u8>>,
    pub events: Vec<DatedEvent>,
    /// Realised uncertain parameters known when the trace was generated,
    /// keyed `kind/entity`. Later draws use the same keyed scheme.
    pub realized: BTreeMap<String, f64>,
    /// Drivers whose past values are revealed after a stage.
    pub observable: Vec<String>,
}

pub const NATIONAL: &str = "national";

/// Drivers whose realised past is revealed between stages.
pub const OBSERVABLE_DRIVERS: [&str; 4] = ["electricity_price", "emission_factor", "pv_cost", "inflation"];

/// Realise every driver for the scopes over `horizon_years` years.
pub fn generate_trace(
    specs: &[DriverSpec],
    scopes: &TraceScopes,
    events: Vec<DatedEvent>,
    realized_keys: &[(String, String)],
    master_seed: u64,
    start_year: i32,
    horizon_years: u32,
    min_horizon: u32,
) -> Result<ScenarioTrace, ScenarioError> {
    if horizon_years < min_horizon {
        return Err(ScenarioError::ShortHorizon { got: horizon_years, min: min_horizon });
    }
    let missing: Vec<String> = REQUIRED_DRIVERS
        .iter()
        .filter(|d| !specs.iter().any(|s| s.driver == **d))
        .map(|d| d.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ScenarioError::MissingDrivers(missing));
    }
    let years = horizon_years as usize;
    let mut series: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut availability = BTreeMap::new();
    for spec in specs {
        spec.check()?;
        let scope_ids: Vec<&str> = match spec.scope {
            ScopeKind::National => vec![NATIONAL],
            ScopeKind::Municipality => scopes.municipalities.iter().map(String::as_str).collect(),
            ScopeKind::SurfaceSource => scopes.surface_sources.iter().map(String::as_str).collect(),
        };
        for scope in scope_ids {
            let mut rng = seed::stream(master_seed, &spec.driver, scope);
            if spec.kind == GeneratorKind::SampledEvent {
                let event = spec.event.as_ref().expect("checked");
                availability.insert(scope.to_owned(), generate_availability(event, years * DAYS_PER_YEAR, &mut rng));
                continue;
            }
            let scale = spec.scale.get(scope).copied().unwrap_or(1.0);
            let path = generate_path(spec, scale, years, &mut rng);
            series.entry(spec.driver.clone()).or_default().insert(scope.to_owned(), path);
        }
    }
    let realized = realized_keys
        .iter()
        .map(|(kind, entity)| (format!("{kind}/{entity}"), seed::keyed_unit(master_seed, kind, entity)))
        .collect();
    let observable = OBSERVABLE_DRIVERS
        .iter()
        .filter(|d| specs.iter().any(|s| s.driver == **d))
        .map(|d| d.to_string())
        .collect();
    Ok(ScenarioTrace {
        format_version: TRACE_FORMAT_VERSION,
        master_seed,
        start_year,
        horizon_years,
        series,
        availability,
        events,
        realized,
        observable,
    })
}

impl ScenarioTrace {
    pub fn end_year(&self) -> i32 {
        self.start_year + self.horizon_years as i32
    }

    fn offset(&self, year: i32) -> Result<usize, ScenarioError> {
        if year < self.start_year || year >= self.end_year() {
            return Err(ScenarioError::OutOfHorizon { year, start: self.start_year, end: self.end_year() });
        }
        Ok((year - self.start_year) as usize)
    }

    pub fn value(&self, driver: &str, scope: &str, year: i32) -> Result<f64, ScenarioError> {
        let t = self.offset(year)?;
        self.series
            .get(driver)
            .and_then(|m| m.get(scope))
            .map(|v| v[t])
            .ok_or_else(|| ScenarioError::MissingSeries { driver: driver.to_owned(), scope: scope.to_owned() })
    }

    pub fn national(&self, driver: &str, year: i32) -> Result<f64, ScenarioError> {
        self.value(driver, NATIONAL, year)
    }

    /// Availability of a surface source on a day; sources without a series are always available.
    pub fn available(&self, source: &str, year: i32, day: usize) -> bool {
        let Ok(t) = self.offset(year) else { return true };
        self.availability.get(source).is_none_or(|v| v[t * DAYS_PER_YEAR + day] == 1)
    }

    /// Uniform draw for an uncertain parameter, from the registry or the keyed scheme.
    pub fn realize(&self, kind: &str, entity: &str) -> f64 {
        self.realized
            .get(&format!("{kind}/{entity}"))
            .copied()
            .unwrap_or_else(|| seed::keyed_unit(self.master_seed, kind, entity))
    }

    /// Seed for a stream owned by one entity, e.g. demand noise of a municipality-year.
    pub fn sub_seed(&self, kind: &str, entity: &str) -> u64 {
        seed::sub_seed(self.master_seed, kind, entity)
    }

    /// Inflation rates indexed from the start year.
    pub fn inflation_path(&self) -> Vec<f64> {
        self.series.get("inflation").and_then(|m| m.get(NATIONAL)).cloned().unwrap_or_default()
    }

    /// Price index of `year` relative to the start year.
    pub fn price_index(&self, year: i32) -> f64 {
        let rates = self.inflation_path();
        let upto = ((year - self.start_year).max(0) as usize).min(rates.len().saturating_sub(1));
        rates.iter().take(upto + 1).skip(1).fold(1.0, |v, r| v * (1.0 + r))
    }

    /// Observable yearly series truncated before `up_to_year`. Realised
    /// hidden parameters are never included.
    pub fn reveal(&self, up_to_year: i32) -> BTreeMap<String, BTreeMap<String, Vec<f64>>> {
        let n = (up_to_year - self.start_year).clamp(0, self.horizon_years as i32) as usize;
        self.series
            .iter()
            .filter(|(d, _)| self.observable.contains(d))
            .filter_map(|(d, scopes)| {
                let cut: BTreeMap<String, Vec<f64>> =
                    scopes.iter().map(|(s, v)| (s.clone(), v[..n].to_vec())).filter(|(_, v)| !v.is_empty()).collect();
                (!cut.is_empty()).then(|| (d.clone(), cut))
            })
            .collect()
    }

    /// Columnar export of the yearly series: `driver scope year value`.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("driver\tscope\tyear\tvalue\n");
        for (driver, scopes) in &self.series {
            for (scope, values) in scopes {
                for (t, v) in values.iter().enumerate() {
                    let _ = writeln!(out, "{driver}\t{scope}\t{}\t{v:?}", self.start_year + t as i32);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(kind: GeneratorKind, band: [f64; 2]) -> DriverSpec {
        DriverSpec {
            driver: "population".into(),
            scope: ScopeKind::Municipality,
            kind,
            start: 1.0,
            growth: 0.005,
            additive: false,
            band,
            volatility: 0.03,
            persistence: 0.7,
            event: None,
            scale: BTreeMap::new(),
        }
    }

    #[test]
    fn degenerate_band_gives_the_mean_path() {
        for kind in [GeneratorKind::BoundedWalk, GeneratorKind::MeanReverting, GeneratorKind::Ar1Lognormal] {
            let s = spec(kind, [0.0, 0.0]);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let path = generate_path(&s, 1.0, 30, &mut rng);
            for (t, v) in path.iter().enumerate() {
                assert_eq!(*v, s.mean(t));
            }
        }
    }

    #[test]
    fn paths_respect_bounds_over_many_seeds() {
        for kind in [GeneratorKind::BoundedWalk, GeneratorKind::MeanReverting, GeneratorKind::Ar1Lognormal] {
            let s = DriverSpec { volatility: 0.2, ..spec(kind, [-0.1, 0.1]) };
            for seed in 0..1000 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let path = generate_path(&s, 2.0, 50, &mut rng);
                for (t, v) in path.iter().enumerate() {
                    let (a, b) = s.bounds(t, 2.0);
                    assert!(*v >= a && *v <= b, "{kind:?} seed {seed} t {t}: {v} not in [{a}, {b}]");
                }
            }
        }
    }

    #[test]
    fn longer_horizon_extends_shorter() {
        let s = spec(GeneratorKind::MeanReverting, [-0.2, 0.2]);
        let a = generate_path(&s, 1.0, 25, &mut ChaCha8Rng::seed_from_u64(9));
        let b = generate_path(&s, 1.0, 50, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a[..], b[..25]);
    }

    #[test]
    fn availability_spells_cluster_in_summer() {
        let e = EventParams { base_probability: 0.02, seasonal_amplitude: 1.0, peak_day: 200.0, mean_spell: 6.0 };
        let days = generate_availability(&e, 365 * 40, &mut ChaCha8Rng::seed_from_u64(2));
        let low_in = |from: usize, to: usize| {
            (0..40).map(|y| (from..to).filter(|d| days[y * 365 + d] == 0).count()).sum::<usize>()
        };
        assert!(low_in(170, 230) > 3 * low_in(0, 60).max(1));
        assert!(days.iter().all(|d| *d <= 1));
    }

    #[test]
    fn reflection_stays_inside() {
        assert!((reflect(0.15, -0.1, 0.1) - 0.05).abs() < 1e-15);
        assert!((reflect(-0.35, -0.1, 0.1) - 0.05).abs() < 1e-15);
        assert_eq!(reflect(3.0, 0.0, 0.0), 0.0);
    }
}
