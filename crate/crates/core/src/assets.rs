//! Asset catalogues and their lifecycle: source costs and permits,
//! construction times, pump fleets, pipe friction and PV.

use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PumpUnit, SourceType, StationState};
use crate::hydraulics::PumpCurve;
use crate::ids::{PipeOptionId, PumpOptionId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssetError {
    #[error("daily volume {volume:.1} m3 exceeds nominal capacity {nominal:.1} m3/day")]
    CapacityExceeded { volume: f64, nominal: f64 },
    #[error("groundwater size {size:.1} m3/day exceeds the permit by more than 30% (limit {limit:.1})")]
    PermitRule { size: f64, limit: f64 },
    #[error("size {size:.1} m3/day exceeds the site maximum {max:.1}")]
    AboveMaximum { size: f64, max: f64 },
    #[error("{0:?} sources need a {1}")]
    MissingLimit(SourceType, &'static str),
    #[error("size must be positive, got {0}")]
    NonPositiveSize(f64),
}

/// Sources are costed by size: below 30 Mm³/year, 30 to 60, and above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSizeClass {
    Small,
    Medium,
    Large,
}

impl SourceSizeClass {
    pub fn of_nominal(nominal_m3_day: f64) -> Self {
        let yearly = nominal_m3_day * 365.0;
        if yearly < 30e6 {
            SourceSizeClass::Small
        } else if yearly <= 60e6 {
            SourceSizeClass::Medium
        } else {
            SourceSizeClass::Large
        }
    }
}

/// Base-year costs for one source size class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceCostEntry {
    pub size_class: SourceSizeClass,
    /// €/year
    pub fixed: f64,
    /// kWh/m³ for treatment
    pub energy_intensity: f64,
    /// €/m³
    pub non_energy: f64,
    /// € per m³/day of nominal capacity
    pub construction_unit_cost: f64,
    /// Annualisation lifetime of a new source, years.
    pub lifetime: f64,
}

/// Parameters shared by all sources of one type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTypeParams {
    pub source_type: SourceType,
    pub target_factor: f64,
    /// Applied to the non-energy rate above the target volume, >= 1.
    pub over_target_multiplier: f64,
    /// Construction time bounds in whole years.
    pub construction_years: [u32; 2],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub fixed: f64,
    pub energy: f64,
    pub non_energy: f64,
    pub extra: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.fixed + self.energy + self.non_energy + self.extra
    }

    pub fn add(&mut self, other: &CostBreakdown, scale: f64) {
        self.fixed += other.fixed * scale;
        self.energy += other.energy * scale;
        self.non_energy += other.non_energy * scale;
        self.extra += other.extra * scale;
    }
}

/// One day of production at a source. The fixed cost is prorated to a day.
/// `cost_scale` escalates the base-year rates.
pub fn production_cost(
    nominal: f64,
    target_factor: f64,
    volume_day: f64,
    electricity_price: f64,
    entry: &SourceCostEntry,
    multiplier: f64,
    cost_scale: f64,
) -> Result<CostBreakdown, AssetError> {
    let slack = 1e-9 * nominal.max(1.0);
    if volume_day > nominal + slack {
        return Err(AssetError::CapacityExceeded { volume: volume_day, nominal });
    }
    let volume = volume_day.max(0.0);
    let rate = entry.non_energy * cost_scale;
    Ok(CostBreakdown {
        fixed: entry.fixed * cost_scale / 365.0,
        energy: volume * entry.energy_intensity * electricity_price,
        non_energy: volume * rate,
        extra: (volume - nominal * target_factor).max(0.0) * rate * (multiplier - 1.0).max(0.0),
    })
}

/// Fine band: applies when exceedance / permit is at most `up_to` (open-ended when `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineBand {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub up_to: Option<f64>,
    /// €/m³ of exceedance
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineSchedule {
    pub bands: Vec<FineBand>,
}

impl FineSchedule {
    /// Severity class (0-based band index) of a relative exceedance.
    pub fn severity(&self, relative: f64) -> usize {
        self.bands
            .iter()
            .position(|b| b.up_to.is_none_or(|u| relative <= u))
            .unwrap_or(self.bands.len().saturating_sub(1))
    }
}

/// Year-end permit check: the whole exceedance is charged at the rate of its severity band.
pub fn check_groundwater_permit(annual_volume: f64, permit: f64, schedule: &FineSchedule, rate_scale: f64) -> f64 {
    let exceedance = annual_volume - permit;
    if exceedance <= 0.0 || schedule.bands.is_empty() {
        return 0.0;
    }
    let band = &schedule.bands[schedule.severity(exceedance / permit)];
    exceedance * band.rate * rate_scale
}

/// Static size rule for a new or existing source.
pub fn check_source_size(kind: SourceType, size: f64, permit: Option<f64>, max_capacity: Option<f64>) -> Result<(), AssetError> {
    if !(size > 0.0) {
        return Err(AssetError::NonPositiveSize(size));
    }
    match kind {
        SourceType::Groundwater => {
            let permit = permit.ok_or(AssetError::MissingLimit(kind, "permit"))?;
            // the permit is yearly, capacity daily
            let limit = 1.3 * permit / 365.0;
            if size > limit * (1.0 + 1e-12) {
                return Err(AssetError::PermitRule { size, limit });
            }
        }
        SourceType::Surface | SourceType::Desalination => {
            let max = max_capacity.ok_or(AssetError::MissingLimit(kind, "maximum capacity"))?;
            if size > max * (1.0 + 1e-12) {
                return Err(AssetError::AboveMaximum { size, max });
            }
        }
    }
    Ok(())
}

/// Whole years drawn uniformly from `[lo, hi]` given a unit draw `u` in (0, 1).
pub fn uniform_years(bounds: [u32; 2], u: f64) -> u32 {
    let [lo, hi] = bounds;
    let span = hi.saturating_sub(lo) + 1;
    lo + ((u * span as f64) as u32).min(span - 1)
}

/// Activation date after a construction time drawn from `bounds`.
pub fn schedule_construction(start: NaiveDate, bounds: [u32; 2], u: f64) -> NaiveDate {
    let years = uniform_years(bounds, u) as i32;
    start.with_year(start.year() + years).unwrap_or(start)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpOption {
    pub id: PumpOptionId,
    pub curve: PumpCurve,
    /// Lifetime bounds in whole years.
    pub lifetime: [u32; 2],
    /// € per unit, base year
    pub unit_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replacement {
    pub unit: usize,
    pub year: i32,
    pub cost: f64,
}

/// Replace every unit whose life ends by `year` with an identical one.
/// `draw_lifetime` realises the new unit's lifetime from its install ordinal.
pub fn age_pump_fleet(
    station: &mut StationState,
    year: i32,
    unit_cost: f64,
    mut draw_lifetime: impl FnMut(u32) -> u32,
) -> Vec<Replacement> {
    let mut out = Vec::new();
    for (k, unit) in station.units.iter_mut().enumerate() {
        if unit.install_year + unit.lifetime_years as i32 <= year {
            station.installs += 1;
            *unit = PumpUnit { install_year: year, lifetime_years: draw_lifetime(station.installs).max(1) };
            out.push(Replacement { unit: k, year, cost: unit_cost });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipeOption {
    pub id: PipeOptionId,
    /// m
    pub diameter: f64,
    pub material: String,
    pub f_new: f64,
    /// Bounds on the yearly friction increase.
    pub decay_rate: [f64; 2],
    /// €/m, base year
    pub cost_per_m: f64,
    /// tCO2eq/m
    pub emissions_per_m: f64,
    /// Annualisation lifetime, years.
    pub lifetime: f64,
}

/// Linear friction growth.
pub fn friction_at(f_new: f64, decay_rate: f64, years: f64) -> f64 {
    f_new + decay_rate * years.max(0.0)
}

pub const PV_LIFETIME_YEARS: i32 = 25;

/// PV output per kW of capacity in an hour of a day: a daylight arc whose
/// length and height follow the season, peaking at midsummer.
pub fn pv_yield(day: usize, hour: usize) -> f64 {
    let season = (2.0 * PI * (day as f64 - 172.0) / 365.0).cos();
    let daylight = 12.0 + 4.0 * season;
    let sunrise = 12.5 - daylight / 2.0;
    let t = hour as f64 + 0.5 - sunrise;
    if t <= 0.0 || t >= daylight {
        return 0.0;
    }
    (PI * t / daylight).sin() * (0.55 + 0.3 * season)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PumpingStation;

    fn entry() -> SourceCostEntry {
        SourceCostEntry {
            size_class: SourceSizeClass::Small,
            fixed: 36_500.0,
            energy_intensity: 0.5,
            non_energy: 0.10,
            construction_unit_cost: 1000.0,
            lifetime: 40.0,
        }
    }

    #[test]
    fn extra_cost_above_target() {
        let c = production_cost(1000.0, 0.8, 900.0, 0.2, &entry(), 1.5, 1.0).unwrap();
        assert!((c.extra - 5.0).abs() < 1e-12);
        assert_eq!(production_cost(1000.0, 0.8, 800.0, 0.2, &entry(), 1.5, 1.0).unwrap().extra, 0.0);
        let idle = production_cost(1000.0, 0.8, 0.0, 0.2, &entry(), 1.5, 1.0).unwrap();
        assert_eq!(idle.total(), idle.fixed);
        assert_eq!(idle.fixed, 100.0);
        assert!(production_cost(1000.0, 0.8, 1000.1, 0.2, &entry(), 1.5, 1.0).is_err());
    }

    #[test]
    fn breakdown_sums_to_total() {
        let c = production_cost(1000.0, 0.8, 950.0, 0.2, &entry(), 1.5, 1.1).unwrap();
        assert!(c.fixed >= 0.0 && c.energy >= 0.0 && c.non_energy >= 0.0 && c.extra >= 0.0);
        assert_eq!(c.total(), c.fixed + c.energy + c.non_energy + c.extra);
        assert!((c.energy - 950.0 * 0.5 * 0.2).abs() < 1e-9);
    }

    #[test]
    fn permit_fines_by_band() {
        let s = FineSchedule { bands: vec![FineBand { up_to: Some(0.1), rate: 0.5 }, FineBand { up_to: None, rate: 2.0 }] };
        assert_eq!(check_groundwater_permit(1000.0, 1000.0, &s, 1.0), 0.0);
        assert_eq!(check_groundwater_permit(1050.0, 1000.0, &s, 1.0), 25.0);
        assert_eq!(check_groundwater_permit(1200.0, 1000.0, &s, 1.0), 400.0);
        assert_eq!(s.severity(0.1), 0);
        assert_eq!(s.severity(0.11), 1);
    }

    #[test]
    fn groundwater_size_rule() {
        let permit = 365_000.0;
        assert!(check_source_size(SourceType::Groundwater, 1300.0, Some(permit), None).is_ok());
        assert!(check_source_size(SourceType::Groundwater, 1.3 * permit / 365.0, Some(permit), None).is_ok());
        assert!(matches!(
            check_source_size(SourceType::Groundwater, 1310.0, Some(permit), None),
            Err(AssetError::PermitRule { .. })
        ));
        assert!(check_source_size(SourceType::Surface, 10.0, None, Some(5.0)).is_err());
        assert!(check_source_size(SourceType::Desalination, 5.0, None, Some(5.0)).is_ok());
    }

    #[test]
    fn construction_years_within_bounds() {
        let start = NaiveDate::from_ymd_opt(2030, 1, 1).unwrap();
        let mut seen = [false; 6];
        for k in 0..10_000 {
            let u = (k as f64 + 0.5) / 10_000.0;
            let y = schedule_construction(start, [5, 10], u).year() - 2030;
            assert!((5..=10).contains(&y));
            seen[(y - 5) as usize] = true;
        }
        assert!(seen.iter().all(|s| *s));
        assert_eq!(schedule_construction(start, [3, 3], 0.99).year(), 2033);
    }

    fn station(units: Vec<PumpUnit>) -> StationState {
        StationState {
            station: PumpingStation {
                id: "PS".into(),
                source_id: "S".into(),
                pump_option: "P1".into(),
                pump_count: units.len() as u32,
                pump_install_dates: vec![NaiveDate::from_ymd_opt(2025, 1, 1).unwrap(); units.len()],
                pv_installations: vec![],
            },
            installs: units.len() as u32,
            units,
        }
    }

    #[test]
    fn pump_replacement_on_end_of_life() {
        let mut s = station(vec![PumpUnit { install_year: 2000, lifetime_years: 15 }]);
        assert!(age_pump_fleet(&mut s, 2014, 100.0, |_| 15).is_empty());
        let r = age_pump_fleet(&mut s, 2015, 100.0, |_| 12);
        assert_eq!(r, vec![Replacement { unit: 0, year: 2015, cost: 100.0 }]);
        assert_eq!(s.units[0], PumpUnit { install_year: 2015, lifetime_years: 12 });
        let mut two = station(vec![PumpUnit { install_year: 2000, lifetime_years: 10 }; 2]);
        assert_eq!(age_pump_fleet(&mut two, 2010, 100.0, |_| 10).len(), 2);
    }

    #[test]
    fn friction_grows_linearly() {
        assert_eq!(friction_at(0.015, 0.0005, 0.0), 0.015);
        assert!((friction_at(0.015, 0.0005, 10.0) - 0.020).abs() < 1e-15);
        assert_eq!(friction_at(0.015, 0.0, 80.0), 0.015);
    }

    #[test]
    fn pv_is_dark_at_night_and_stronger_in_summer() {
        assert_eq!(pv_yield(172, 1), 0.0);
        assert!(pv_yield(172, 12) > pv_yield(0, 12));
        let summer: f64 = (0..24).map(|h| pv_yield(172, h)).sum();
        assert!(summer > 5.0 && summer < 12.0);
    }
}
