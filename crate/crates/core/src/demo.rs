//! Synthetic instance generator. `generate(12, DEMO_SEED)` is the bundled demo.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::Rng;

use crate::assets::{
    FineBand, FineSchedule, PipeOption, PumpOption, SourceCostEntry, SourceSizeClass, SourceTypeParams,
};
use crate::demand::Phase3Params;
use crate::domain::{
    Connection, ConnectionKind, Municipality, PipeInstance, PumpingStation, SizeClass, SourceType, WaterSource,
    WaterUtility,
};
use crate::economy::AllocationRule;
use crate::hydraulics::{PumpCurve, SolverOptions};
use crate::ids::{ConnectionId, SourceId};
use crate::instance::{DemandParams, EconomicParams, HouseholdClass, Instance, SourceSite, TariffEntry, INSTANCE_FORMAT_VERSION};
use crate::nrw::{km_pipes, NrwClass, NrwClassTable, NrwCostEntry, NrwParams};
use crate::scenario::{DriverSpec, EventParams, GeneratorKind, ScopeKind};
use crate::seed;

pub const DEMO_SEED: u64 = 2025;
pub const DEMO_MUNICIPALITIES: usize = 12;
pub const DEMO_START_YEAR: i32 = 2025;

/// The bundled demo document, identical to `generate(12, DEMO_SEED)`.
pub const DEMO_JSON: &str = include_str!("../data/demo.json");

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

/// Great-circle distance in metres.
pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6_371_000.0 * a.sqrt().asin()
}

fn round_to(v: f64, step: f64) -> f64 {
    if step >= 1.0 {
        return (v / step).round() * step;
    }
    let per = (1.0 / step).round();
    (v * per).round() / per
}

fn pump_option(id: &str, q: f64, h0: f64, cost: f64) -> PumpOption {
    PumpOption {
        id: id.into(),
        curve: PumpCurve {
            head: vec![[0.0, h0], [0.5 * q, round_to(0.92 * h0, 0.1)], [q, round_to(0.7 * h0, 0.1)]],
            efficiency: vec![[0.0, 0.35], [0.5 * q, 0.78], [0.8 * q, 0.82], [q, 0.74]],
        },
        lifetime: [12, 20],
        unit_cost: cost,
    }
}

fn pipe_option(id: &str, d: f64, cost: f64) -> PipeOption {
    PipeOption {
        id: id.into(),
        diameter: d,
        material: if d < 0.6 { "pvc".into() } else { "ductile_iron".into() },
        f_new: 0.012,
        decay_rate: [0.0001, 0.0004],
        cost_per_m: cost,
        emissions_per_m: 0.25 * d + 0.05,
        lifetime: 60.0,
    }
}

fn driver(name: &str, scope: ScopeKind, kind: GeneratorKind, start: f64, growth: f64, band: [f64; 2], vol: f64, pers: f64) -> DriverSpec {
    DriverSpec {
        driver: name.into(),
        scope,
        kind,
        start,
        growth,
        additive: false,
        band,
        volatility: vol,
        persistence: pers,
        event: None,
        scale: BTreeMap::new(),
    }
}

/// Mean daily consumption per inhabitant assumed when sizing sources, m³.
const SIZING_M3_PER_PERSON_DAY: f64 = 0.22;

/// Build a synthetic instance with `munis` municipalities.
pub fn generate(munis: usize, master_seed: u64) -> Instance {
    let munis = munis.max(2);
    let mut rng = seed::stream(master_seed, "gen-instance", "layout");
    let n_prov = munis.div_ceil(6).max(1);
    let utilities: Vec<WaterUtility> = (1..=n_prov)
        .map(|p| WaterUtility { id: format!("U{p}").as_str().into(), province: format!("P{p}").as_str().into() })
        .collect();
    let cols = (munis as f64).sqrt().ceil() as usize;

    let mut municipalities: Vec<Municipality> = (0..munis)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let lat = 52.0 + 0.12 * r as f64 + rng.random_range(-0.03..0.03);
            let lon = 5.0 + 0.18 * c as f64 + rng.random_range(-0.04..0.04);
            let u: f64 = rng.random();
            let population = round_to(6_000.0 * (1.0 + 14.0 * u * u), 10.0);
            let prov = (c * n_prov / cols).min(n_prov - 1) + 1;
            Municipality {
                id: format!("M{:02}", i + 1).as_str().into(),
                name: format!("Town {}", i + 1),
                latitude: round_to(lat, 1e-4),
                longitude: round_to(lon, 1e-4),
                elevation: round_to(rng.random_range(0.0..25.0), 0.1),
                province: format!("P{prov}").as_str().into(),
                begin_date: date(1990, 1, 1),
                end_date: None,
                end_disposition: None,
                population,
                surface_land: round_to(population / 800.0 + rng.random_range(5.0..30.0), 0.1),
                surface_water_inland: round_to(rng.random_range(0.2..3.0), 0.1),
                surface_water_open: 0.0,
                houses: (population / 2.2).round(),
                businesses: (population / 14.0).round(),
                dist_net_length: round_to(km_pipes(population), 0.1),
                dist_net_avg_age: round_to(rng.random_range(12.0..50.0), 0.1),
            }
        })
        .collect();

    let dist = |a: &Municipality, b: &Municipality| {
        round_to(1.15 * haversine(a.latitude, a.longitude, b.latitude, b.longitude), 10.0)
    };

    // spanning tree to the nearest earlier town, then a few shortest chords
    let mut links: Vec<(usize, usize)> = Vec::new();
    for i in 1..munis {
        let j = (0..i)
            .min_by(|&a, &b| dist(&municipalities[i], &municipalities[a]).total_cmp(&dist(&municipalities[i], &municipalities[b])))
            .expect("i >= 1");
        links.push((j, i));
    }
    let mut chords: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..munis {
        for j in i + 1..munis {
            if !links.contains(&(i, j)) && !links.contains(&(j, i)) {
                chords.push((dist(&municipalities[i], &municipalities[j]), i, j));
            }
        }
    }
    chords.sort_by(|a, b| a.0.total_cmp(&b.0));
    let installed_chords = munis / 4;
    let spare = munis / 3;
    let connections: Vec<Connection> = links
        .iter()
        .map(|(a, b)| (*a, *b, true))
        .chain(chords.iter().take(installed_chords + spare).enumerate().map(|(k, (_, a, b))| (*a, *b, k < installed_chords)))
        .enumerate()
        .map(|(k, (a, b, installed))| {
            let (ma, mb) = (&municipalities[a], &municipalities[b]);
            Connection {
                id: ConnectionId::new(format!("C{:02}", k + 1)),
                node_a: ma.id.clone(),
                node_b: mb.id.clone(),
                kind: if ma.province == mb.province { ConnectionKind::IntraProvince } else { ConnectionKind::InterProvince },
                distance: dist(ma, mb),
                minor_loss: 0.0,
                installed_pipe: installed.then(|| PipeInstance {
                    option_id: "DN800".into(),
                    install_date: date(1980 + (k as i32 * 7) % 35, 1, 1),
                    current_friction: round_to(0.012 + 0.0002 * ((k * 7) % 35) as f64, 1e-5),
                }),
            }
        })
        .collect();

    // sources at the largest towns, spread across the tree
    let n_src = (munis / 3).max(2);
    let mut by_pop: Vec<usize> = (0..munis).collect();
    by_pop.sort_by(|a, b| municipalities[*b].population.total_cmp(&municipalities[*a].population).then(a.cmp(b)));
    let hosts: Vec<usize> = by_pop.iter().copied().take(n_src).collect();
    let total_pop: f64 = municipalities.iter().map(|m| m.population).sum();
    let per_source = round_to(1.5 * total_pop * SIZING_M3_PER_PERSON_DAY / n_src as f64, 100.0);
    let types = [SourceType::Groundwater, SourceType::Groundwater, SourceType::Surface, SourceType::Desalination];
    let unit_flow = 1500.0;
    let mut sources = Vec::new();
    let mut stations = Vec::new();
    for (k, &h) in hosts.iter().enumerate() {
        let m = &municipalities[h];
        let t = types[k % types.len()];
        let id = SourceId::new(format!("S{}", k + 1));
        let count = ((per_source / 24.0 * 2.0) / unit_flow).ceil().max(2.0) as u32;
        sources.push(WaterSource {
            id: id.clone(),
            source_type: t,
            latitude: round_to(m.latitude + 0.01, 1e-4),
            longitude: round_to(m.longitude - 0.01, 1e-4),
            elevation: round_to((m.elevation - 3.0).max(0.0), 0.1),
            province: m.province.clone(),
            connected_municipality: m.id.clone(),
            activation_date: date(1995, 1, 1),
            closure_date: None,
            nominal_capacity: per_source,
            target_factor: 0.8,
            permit: (t == SourceType::Groundwater).then(|| round_to(per_source * 365.0 * 0.85, 1000.0)),
            max_capacity: (t != SourceType::Groundwater).then_some(round_to(per_source * 1.5, 100.0)),
        });
        stations.push(PumpingStation {
            id: format!("PS-{id}").as_str().into(),
            source_id: id,
            pump_option: "PL".into(),
            pump_count: count,
            pump_install_dates: (0..count).map(|u| date(2010 + (u as i32 * 3 + k as i32) % 14, 1, 1)).collect(),
            pv_installations: vec![],
        });
    }
    // a clustering event for larger instances, an absorption for the demo size and up
    if munis >= 10 {
        let small: Vec<usize> = by_pop.iter().rev().copied().filter(|i| !hosts.contains(i)).take(1).collect();
        if let Some(&s) = small.first() {
            let dst = links.iter().find_map(|&(a, b)| if b == s { Some(a) } else if a == s { Some(b) } else { None });
            if let Some(d) = dst {
                let dst_id = municipalities[d].id.clone();
                let m = &mut municipalities[s];
                m.end_date = Some(date(DEMO_START_YEAR + 8, 1, 1));
                m.end_disposition = Some(crate::domain::EndDisposition::AbsorbedInto(dst_id));
            }
        }
    }

    let site_host = |k: usize| &municipalities[by_pop[(n_src + k) % munis]];
    let sites: Vec<SourceSite> = [SourceType::Groundwater, SourceType::Surface, SourceType::Desalination, SourceType::Groundwater]
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let m = site_host(k);
            SourceSite {
                id: SourceId::new(format!("N{}", k + 1)),
                source_type: *t,
                latitude: round_to(m.latitude - 0.01, 1e-4),
                longitude: round_to(m.longitude + 0.01, 1e-4),
                elevation: round_to((m.elevation - 2.0).max(0.0), 0.1),
                province: m.province.clone(),
                connected_municipality: m.id.clone(),
                permit: (*t == SourceType::Groundwater).then_some(7_300_000.0),
                max_capacity: (*t != SourceType::Groundwater).then_some(40_000.0),
                pump_option: "PM".into(),
                pump_count: 3,
            }
        })
        .collect();

    let mut nrw_costs = Vec::new();
    for (ci, class) in NrwClass::ALL.into_iter().enumerate() {
        for (si, size) in [SizeClass::Small, SizeClass::Medium, SizeClass::Large].into_iter().enumerate() {
            let unit = 40_000.0 + 15_000.0 * ci as f64 + 10_000.0 * si as f64;
            nrw_costs.push(NrwCostEntry { class, size_class: size, unit_cost: unit, effectiveness: 12.0 / unit });
        }
    }

    let muni_scope = ScopeKind::Municipality;
    let nat = ScopeKind::National;
    let mut income = driver("income_index", muni_scope, GeneratorKind::MeanReverting, 1.0, 0.0, [-0.2, 0.2], 0.03, 0.8);
    for m in &municipalities {
        income.scale.insert(m.id.to_string(), round_to(0.85 + 0.3 * seed::keyed_unit(master_seed, "gen-instance.income", m.id.as_str()), 0.01));
    }
    let temperature = DriverSpec {
        additive: true,
        ..driver("max_temperature", nat, GeneratorKind::MeanReverting, 31.0, 0.04, [-0.08, 0.08], 0.03, 0.3)
    };
    let availability = DriverSpec {
        event: Some(EventParams { base_probability: 0.004, seasonal_amplitude: 1.0, peak_day: 215.0, mean_spell: 6.0 }),
        ..driver("availability", ScopeKind::SurfaceSource, GeneratorKind::SampledEvent, 1.0, 0.0, [0.0, 0.0], 0.0, 0.0)
    };
    let drivers = vec![
        driver("population", muni_scope, GeneratorKind::BoundedWalk, 1.0, 0.004, [-0.1, 0.1], 0.01, 0.0),
        income,
        driver("per_household_demand", nat, GeneratorKind::BoundedWalk, 1.0, -0.002, [-0.1, 0.1], 0.01, 0.0),
        driver("per_business_demand", nat, GeneratorKind::BoundedWalk, 1.0, 0.0, [-0.1, 0.1], 0.01, 0.0),
        temperature,
        driver("electricity_price", nat, GeneratorKind::Ar1Lognormal, 0.15, 0.01, [-0.3, 0.4], 0.1, 0.6),
        driver("emission_factor", nat, GeneratorKind::BoundedWalk, 0.35, -0.04, [-0.2, 0.2], 0.03, 0.0),
        driver("pv_cost", nat, GeneratorKind::BoundedWalk, 900.0, -0.03, [-0.15, 0.15], 0.03, 0.0),
        driver("inflation", nat, GeneratorKind::MeanReverting, 0.02, 0.0, [-1.0, 1.5], 0.4, 0.5),
        driver("investor_demand", nat, GeneratorKind::MeanReverting, 1.0, 0.0, [-0.2, 0.2], 0.08, 0.3),
        availability,
    ];

    Instance {
        format_version: INSTANCE_FORMAT_VERSION,
        name: format!("synthetic-{munis}-{master_seed}"),
        start_year: DEMO_START_YEAR,
        economy: EconomicParams {
            national_budget: round_to(30.0 * total_pop, 1000.0),
            budget_rule: AllocationRule::PerCapita,
            bond_maturity: 20,
            risk_free: 0.03,
            credit_spread: 0.01,
            demand_sensitivity: 0.02,
            tariffs: utilities
                .iter()
                .enumerate()
                .map(|(k, u)| TariffEntry { utility: u.id.clone(), fixed_per_month: 8.0 + k as f64, volumetric: 1.2 + 0.1 * k as f64 })
                .collect(),
            base_income: 2800.0,
            price_shape: [
                0.7, 0.65, 0.62, 0.6, 0.62, 0.7, 0.9, 1.1, 1.2, 1.2, 1.15, 1.15, 1.12, 1.1, 1.1, 1.12, 1.2, 1.3, 1.35, 1.25,
                1.1, 0.95, 0.85, 0.76,
            ],
            embedded_ef_per_eur: 0.0002,
            nrw_lifetime: 30.0,
            lifeline_per_person: 1.5,
        },
        utilities,
        municipalities,
        sources,
        stations,
        connections,
        sites,
        pump_options: vec![
            pump_option("PS", 400.0, 80.0, 40_000.0),
            pump_option("PM", 800.0, 85.0, 70_000.0),
            pump_option("PL", unit_flow, 90.0, 120_000.0),
        ],
        pipe_options: vec![
            pipe_option("DN300", 0.3, 350.0),
            pipe_option("DN500", 0.5, 600.0),
            pipe_option("DN800", 0.8, 1100.0),
            pipe_option("DN1000", 1.0, 1500.0),
        ],
        source_types: vec![
            SourceTypeParams { source_type: SourceType::Groundwater, target_factor: 0.8, over_target_multiplier: 1.3, construction_years: [2, 4] },
            SourceTypeParams { source_type: SourceType::Surface, target_factor: 0.8, over_target_multiplier: 1.2, construction_years: [3, 6] },
            SourceTypeParams { source_type: SourceType::Desalination, target_factor: 0.85, over_target_multiplier: 1.5, construction_years: [5, 10] },
        ],
        source_costs: vec![
            SourceCostEntry { size_class: SourceSizeClass::Small, fixed: 400_000.0, energy_intensity: 0.4, non_energy: 0.12, construction_unit_cost: 900.0, lifetime: 40.0 },
            SourceCostEntry { size_class: SourceSizeClass::Medium, fixed: 900_000.0, energy_intensity: 0.35, non_energy: 0.10, construction_unit_cost: 800.0, lifetime: 40.0 },
            SourceCostEntry { size_class: SourceSizeClass::Large, fixed: 1_600_000.0, energy_intensity: 0.3, non_energy: 0.09, construction_unit_cost: 700.0, lifetime: 40.0 },
        ],
        fines: FineSchedule {
            bands: vec![
                FineBand { up_to: Some(0.05), rate: 0.05 },
                FineBand { up_to: Some(0.15), rate: 0.15 },
                FineBand { up_to: None, rate: 0.40 },
            ],
        },
        nrw: NrwParams { table: NrwClassTable::default(), mode_fraction: 1.0 / 3.0, km_per_10k: 57.7, costs: nrw_costs },
        household_classes: vec![
            HouseholdClass { id: "low".into(), share: 0.3, income_multiplier: 0.55, household_size: 2.6 },
            HouseholdClass { id: "middle".into(), share: 0.5, income_multiplier: 1.0, household_size: 2.2 },
            HouseholdClass { id: "high".into(), share: 0.2, income_multiplier: 1.8, household_size: 2.0 },
        ],
        demand: DemandParams {
            per_household: 290.0,
            per_business: 900.0,
            national_target_lpcd: 130.0,
            volume_sigma: 0.05,
            profiles_per_class: 4,
            phase3: Phase3Params::default(),
        },
        drivers,
        solver: SolverOptions::default(),
    }
}

/// Parsed bundled demo.
pub fn demo_instance() -> Instance {
    crate::instance::parse_instance(DEMO_JSON, "demo.json").expect("bundled demo is valid")
}

/// Ids used by the plan-validation fixtures.
pub fn first_groundwater_site(inst: &Instance) -> Option<&SourceSite> {
    inst.sites.iter().find(|s| s.source_type == SourceType::Groundwater)
}

pub fn first_installed_connection(inst: &Instance) -> Option<&Connection> {
    inst.connections.iter().find(|c| c.installed_pipe.is_some())
}

pub fn first_free_connection(inst: &Instance) -> Option<&Connection> {
    inst.connections.iter().find(|c| c.installed_pipe.is_none())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO_PATH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/demo.json");

    #[test]
    fn bundled_demo_matches_generator() {
        let text = generate(DEMO_MUNICIPALITIES, DEMO_SEED).to_canonical_json();
        if std::env::var_os("AQUEDUCT_REGEN_DEMO").is_some() {
            std::fs::write(DEMO_PATH, &text).unwrap();
            return;
        }
        assert!(DEMO_JSON == text, "data/demo.json is stale; rerun with AQUEDUCT_REGEN_DEMO=1");
    }

    #[test]
    fn generated_instances_validate() {
        for n in [3, 6, 12, 20] {
            let inst = generate(n, 7);
            let issues = inst.validate();
            assert!(issues.is_empty(), "{n} municipalities: {issues:#?}");
        }
    }

    #[test]
    fn haversine_one_degree_of_latitude() {
        assert!((haversine(40.0, 0.0, 41.0, 0.0) - 111_195.0).abs() < 100.0);
    }
}
