//! Non-revenue water: age classes, leakage sampling and reduction policies.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::SizeClass;
use crate::ids::MunicipalityId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NrwError {
    #[error("network age must be a non-negative number, got {0}")]
    BadAge(f64),
    #[error("NRW class table: {0}")]
    BadTable(&'static str),
    #[error("no NRW unit cost for class {class:?} and size class {size:?}")]
    MissingCost { class: NrwClass, size: SizeClass },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NrwClass {
    A,
    B,
    C,
    D,
    E,
}

impl NrwClass {
    pub const ALL: [NrwClass; 5] = [NrwClass::A, NrwClass::B, NrwClass::C, NrwClass::D, NrwClass::E];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The next better class, if any.
    pub fn better(self) -> Option<NrwClass> {
        self.index().checked_sub(1).map(|i| Self::ALL[i])
    }
}

/// Age breakpoints and per-km daily leakage bounds for classes A to E.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NrwClassTable {
    /// Lower age edges of classes B..E, years.
    pub breakpoints: [f64; 4],
    /// (lower, upper) NRW rate per class, m³/day per km of pipe.
    pub bounds: [(f64, f64); 5],
}

impl Default for NrwClassTable {
    fn default() -> Self {
        Self {
            breakpoints: [25.0, 43.0, 54.0, 60.0],
            // class E is open-ended; capped for sampling
            bounds: [(0.0, 12.0), (12.0, 20.0), (20.0, 35.0), (35.0, 55.0), (55.0, 80.0)],
        }
    }
}

impl NrwClassTable {
    pub fn validate(&self) -> Result<(), NrwError> {
        if self.breakpoints[0] <= 0.0 || self.breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(NrwError::BadTable("breakpoints must be positive and strictly increasing"));
        }
        if self.bounds.iter().any(|(lo, hi)| !(*lo >= 0.0 && hi > lo)) {
            return Err(NrwError::BadTable("each class needs 0 <= lower < upper"));
        }
        if self.bounds.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(NrwError::BadTable("class bounds must be contiguous"));
        }
        Ok(())
    }

    /// Lower-inclusive classification: A is [0, 25), E is [60, inf).
    pub fn classify(&self, age: f64) -> Result<NrwClass, NrwError> {
        if !(age >= 0.0) {
            return Err(NrwError::BadAge(age));
        }
        let i = self.breakpoints.partition_point(|b| *b <= age);
        Ok(NrwClass::ALL[i])
    }

    /// Age band of a class; E ends 20 years past its lower edge for midpoint purposes.
    pub fn age_band(&self, class: NrwClass) -> (f64, f64) {
        let i = class.index();
        let lo = if i == 0 { 0.0 } else { self.breakpoints[i - 1] };
        let hi = if i == 4 { lo + 20.0 } else { self.breakpoints[i] };
        (lo, hi)
    }

    pub fn age_midpoint(&self, class: NrwClass) -> f64 {
        let (lo, hi) = self.age_band(class);
        0.5 * (lo + hi)
    }

    /// Per-km rate at quantile `u` of the class distribution: triangular on
    /// the class bounds with its mode `mode_fraction` of the way up.
    pub fn rate_at_quantile(&self, class: NrwClass, u: f64, mode_fraction: f64) -> f64 {
        let (a, b) = self.bounds[class.index()];
        let c = a + mode_fraction * (b - a);
        let u = u.clamp(0.0, 1.0);
        let split = (c - a) / (b - a);
        if u < split {
            a + (u * (b - a) * (c - a)).sqrt()
        } else {
            b - ((1.0 - u) * (b - a) * (b - c)).sqrt()
        }
    }
}

/// Length of the inner distribution network: 57.7 km per 10 000 inhabitants.
pub fn km_pipes(population: f64) -> f64 {
    km_pipes_with_ratio(population, 57.7)
}

pub fn km_pipes_with_ratio(population: f64, km_per_10k: f64) -> f64 {
    km_per_10k * population / 10_000.0
}

pub fn classify(age: f64) -> Result<NrwClass, NrwError> {
    NrwClassTable::default().classify(age)
}

/// Daily NRW volume (m³/day) for a network of `km` kilometres.
pub fn sample_nrw_demand<R: Rng + ?Sized>(table: &NrwClassTable, class: NrwClass, km: f64, mode_fraction: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    table.rate_at_quantile(class, u, mode_fraction) * km
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NrwPolicy {
    ByLeakClass,
    ByPopulation,
}

/// Cost and effect of network renewal for one class and municipality size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NrwCostEntry {
    pub class: NrwClass,
    pub size_class: SizeClass,
    /// € per km of network to move up one class.
    pub unit_cost: f64,
    /// Years of age removed per € spent per km.
    pub effectiveness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NrwParams {
    #[serde(default)]
    pub table: NrwClassTable,
    #[serde(default = "default_mode_fraction")]
    pub mode_fraction: f64,
    #[serde(default = "default_km_ratio")]
    pub km_per_10k: f64,
    pub costs: Vec<NrwCostEntry>,
}

fn default_mode_fraction() -> f64 {
    1.0 / 3.0
}

fn default_km_ratio() -> f64 {
    57.7
}

impl NrwParams {
    pub fn cost(&self, class: NrwClass, size: SizeClass) -> Result<&NrwCostEntry, NrwError> {
        self.costs
            .iter()
            .find(|c| c.class == class && c.size_class == size)
            .ok_or(NrwError::MissingCost { class, size })
    }
}

/// One municipality as seen by an NRW intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct NrwTarget {
    pub id: MunicipalityId,
    pub population: f64,
    pub age: f64,
    pub km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NrwOutcome {
    /// New average network age per target, same order as the input.
    pub ages: Vec<f64>,
    pub spent: f64,
}

/// Spend up to `budget` (€) on network renewal. `cost_scale` escalates the
/// catalogue unit costs to the current year.
pub fn apply_nrw_intervention(
    params: &NrwParams,
    targets: &[NrwTarget],
    budget: f64,
    policy: NrwPolicy,
    cost_scale: f64,
) -> Result<NrwOutcome, NrwError> {
    let table = &params.table;
    let mut ages: Vec<f64> = targets.iter().map(|t| t.age).collect();
    if budget <= 0.0 || targets.is_empty() {
        return Ok(NrwOutcome { ages, spent: 0.0 });
    }
    let mut spent = 0.0;
    match policy {
        NrwPolicy::ByLeakClass => {
            let mut order: Vec<(usize, NrwClass)> = targets
                .iter()
                .enumerate()
                .map(|(i, t)| Ok((i, table.classify(t.age)?)))
                .collect::<Result<_, NrwError>>()?;
            order.sort_by(|a, b| {
                b.1.cmp(&a.1)
                    .then(targets[b.0].km.total_cmp(&targets[a.0].km))
                    .then(targets[a.0].id.cmp(&targets[b.0].id))
            });
            for (i, class) in order {
                let Some(better) = class.better() else { continue };
                let t = &targets[i];
                let price = params.cost(class, SizeClass::of(t.population))?.unit_cost * cost_scale * t.km;
                if spent + price <= budget {
                    spent += price;
                    ages[i] = ages[i].min(table.age_midpoint(better));
                }
            }
        }
        NrwPolicy::ByPopulation => {
            let total_pop: f64 = targets.iter().map(|t| t.population.max(0.0)).sum();
            if total_pop <= 0.0 {
                return Ok(NrwOutcome { ages, spent: 0.0 });
            }
            for (i, t) in targets.iter().enumerate() {
                let funds = budget * t.population.max(0.0) / total_pop;
                if funds <= 0.0 || t.km <= 0.0 {
                    continue;
                }
                let class = table.classify(t.age)?;
                let eff = params.cost(class, SizeClass::of(t.population))?.effectiveness / cost_scale;
                let reduction = funds * eff / t.km;
                // money beyond what brings the age to zero is not spent
                let used = if reduction > t.age { funds * t.age / reduction } else { funds };
                ages[i] = (t.age - reduction).max(0.0);
                spent += used;
            }
        }
    }
    Ok(NrwOutcome { ages, spent: spent.min(budget) })
}
