//! Entities of the regional system and the municipality lifecycle.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::is_jan1;
use crate::economy::UtilityFinance;
use crate::ids::{ConnectionId, MunicipalityId, PipeOptionId, ProvinceId, PumpOptionId, SourceId, StationId, UtilityId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("lifecycle events happen on January 1st, got {0}")]
    NotJan1(NaiveDate),
    #[error("municipality {0} is not open")]
    NotOpen(MunicipalityId),
    #[error("municipality {0} is unknown")]
    UnknownMunicipality(MunicipalityId),
    #[error("municipality {0} already changed status on {1}; chained events on one date are rejected")]
    ChainedEvent(MunicipalityId, NaiveDate),
    #[error("municipality {0} cannot absorb itself")]
    SelfAbsorb(MunicipalityId),
}

/// Municipality size class used for cost lookups and profile selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    /// Below 20 000 inhabitants small, up to 100 000 medium, above that large.
    pub fn of(population: f64) -> Self {
        if population < 20_000.0 {
            SizeClass::Small
        } else if population <= 100_000.0 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaterUtility {
    pub id: UtilityId,
    pub province: ProvinceId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndDisposition {
    AbsorbedInto(MunicipalityId),
    ClusteredInto(MunicipalityId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Municipality {
    pub id: MunicipalityId,
    pub name: String,
    pub latitude: f64,
    pub longitude: f64,
    pub elevation: f64,
    pub province: ProvinceId,
    pub begin_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_disposition: Option<EndDisposition>,
    pub population: f64,
    pub surface_land: f64,
    pub surface_water_inland: f64,
    pub surface_water_open: f64,
    pub houses: f64,
    pub businesses: f64,
    /// km
    pub dist_net_length: f64,
    /// years
    pub dist_net_avg_age: f64,
}

impl Municipality {
    /// Fold the additive attributes of `other` into `self`; the network age
    /// becomes the length-weighted mean.
    pub fn absorb_attributes(&mut self, other: &Municipality) {
        let len = self.dist_net_length + other.dist_net_length;
        if len > 0.0 {
            self.dist_net_avg_age =
                (self.dist_net_avg_age * self.dist_net_length + other.dist_net_avg_age * other.dist_net_length) / len;
        }
        self.dist_net_length = len;
        self.population += other.population;
        self.surface_land += other.surface_land;
        self.surface_water_inland += other.surface_water_inland;
        self.surface_water_open += other.surface_water_open;
        self.houses += other.houses;
        self.businesses += other.businesses;
    }

    fn clear_additive(&mut self) {
        self.population = 0.0;
        self.surface_land = 0.0;
        self.surface_water_inland = 0.0;
        self.surface_water_open = 0.0;
        self.houses = 0.0;
        self.businesses = 0.0;
        self.dist_net_length = 0.0;
        self.dist_net_avg_age = 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceType {
    Groundwater,
    Surface,
    Desalination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaterSource {
    pub id: SourceId,
    pub source_type: SourceType,
    pub latitude: f64,
    pub longitude: f64,
    pub elevation: f64,
    pub province: ProvinceId,
    pub connected_municipality: MunicipalityId,
    pub activation_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closure_date: Option<NaiveDate>,
    /// m³/day
    pub nominal_capacity: f64,
    pub target_factor: f64,
    /// m³/year, groundwater only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permit: Option<f64>,
    /// m³/day, surface and desalination only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_capacity: Option<f64>,
}

impl WaterSource {
    pub fn is_active(&self, date: NaiveDate) -> bool {
        self.activation_date <= date && self.closure_date.is_none_or(|c| date < c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionKind {
    IntraProvince,
    InterProvince,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipeInstance {
    pub option_id: PipeOptionId,
    pub install_date: NaiveDate,
    pub current_friction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Connection {
    pub id: ConnectionId,
    pub node_a: MunicipalityId,
    pub node_b: MunicipalityId,
    pub kind: ConnectionKind,
    /// m
    pub distance: f64,
    #[serde(default)]
    pub minor_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub installed_pipe: Option<PipeInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvInstallation {
    pub install_date: NaiveDate,
    /// kW peak
    pub capacity_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpingStation {
    pub id: StationId,
    pub source_id: SourceId,
    pub pump_option: PumpOptionId,
    pub pump_count: u32,
    /// One entry per unit.
    pub pump_install_dates: Vec<NaiveDate>,
    #[serde(default)]
    pub pv_installations: Vec<PvInstallation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MunicipalityStatus {
    /// Not yet begun.
    Pending,
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MunicipalityState {
    pub muni: Municipality,
    pub status: MunicipalityStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_changed: Option<NaiveDate>,
}

/// Realised lifetime of one pump unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpUnit {
    pub install_year: i32,
    pub lifetime_years: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationState {
    pub station: PumpingStation,
    pub units: Vec<PumpUnit>,
    /// Number of unit installations so far, used to key lifetime draws.
    pub installs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeState {
    /// Realised friction growth per year.
    pub decay_rate: f64,
    pub f_new: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    Source,
    Pipe,
    Pump,
    Pv,
    Nrw,
}

/// A capital expenditure that is annualised over its lifetime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapitalAsset {
    pub utility: UtilityId,
    pub kind: AssetKind,
    pub label: String,
    pub year: i32,
    /// €
    pub capex: f64,
    /// years
    pub lifetime: f64,
    /// tCO2eq embedded over the whole life
    pub embedded: f64,
    /// Replacement forced by end of life rather than planned.
    #[serde(default)]
    pub unplanned: bool,
}

/// Complete mutable state of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub start_year: i32,
    /// Next year to simulate.
    pub year: i32,
    pub utilities: Vec<WaterUtility>,
    pub municipalities: BTreeMap<MunicipalityId, MunicipalityState>,
    /// Closed municipality to the node that took over its connections.
    pub aliases: BTreeMap<MunicipalityId, MunicipalityId>,
    pub sources: BTreeMap<SourceId, WaterSource>,
    pub stations: BTreeMap<StationId, StationState>,
    pub connections: BTreeMap<ConnectionId, Connection>,
    pub pipes: BTreeMap<ConnectionId, PipeState>,
    pub finance: BTreeMap<UtilityId, UtilityFinance>,
    pub assets: Vec<CapitalAsset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LifecycleEvent {
    Absorb { src: MunicipalityId, dst: MunicipalityId },
    Cluster { srcs: Vec<MunicipalityId>, new: MunicipalityId },
}

impl WorldState {
    pub fn utility_of_province(&self, province: &ProvinceId) -> Option<&UtilityId> {
        self.utilities.iter().find(|u| &u.province == province).map(|u| &u.id)
    }

    pub fn is_open(&self, id: &MunicipalityId) -> bool {
        self.municipalities.get(id).is_some_and(|m| m.status == MunicipalityStatus::Open)
    }

    /// Follow absorb/cluster redirects to the node that currently represents `id`.
    pub fn resolve<'a>(&'a self, mut id: &'a MunicipalityId) -> &'a MunicipalityId {
        // chains are acyclic by construction; the bound guards malformed input
        for _ in 0..=self.aliases.len() {
            match self.aliases.get(id) {
                Some(next) => id = next,
                None => break,
            }
        }
        id
    }

    pub fn open_municipalities(&self) -> impl Iterator<Item = &MunicipalityState> {
        self.municipalities.values().filter(|m| m.status == MunicipalityStatus::Open)
    }

    pub fn total_open_population(&self) -> f64 {
        self.open_municipalities().map(|m| m.muni.population).sum()
    }

    fn require_open(&self, id: &MunicipalityId, date: NaiveDate) -> Result<(), DomainError> {
        let m = self.municipalities.get(id).ok_or_else(|| DomainError::UnknownMunicipality(id.clone()))?;
        if m.status_changed == Some(date) {
            return Err(DomainError::ChainedEvent(id.clone(), date));
        }
        if m.status != MunicipalityStatus::Open {
            return Err(DomainError::NotOpen(id.clone()));
        }
        Ok(())
    }

    fn close(&mut self, id: &MunicipalityId, into: &MunicipalityId, date: NaiveDate) -> Municipality {
        let m = self.municipalities.get_mut(id).expect("checked open");
        let taken = m.muni.clone();
        m.muni.clear_additive();
        m.status = MunicipalityStatus::Closed;
        m.status_changed = Some(date);
        self.aliases.insert(id.clone(), into.clone());
        taken
    }

    /// Apply an absorb or cluster event. Additive attributes move to the
    /// surviving node; connections of a closing node are taken over by it,
    /// and a connection whose two ends now resolve to one node is hidden.
    pub fn apply_lifecycle_event(&mut self, event: &LifecycleEvent, date: NaiveDate) -> Result<(), DomainError> {
        if !is_jan1(date) {
            return Err(DomainError::NotJan1(date));
        }
        match event {
            LifecycleEvent::Absorb { src, dst } => {
                if src == dst {
                    return Err(DomainError::SelfAbsorb(src.clone()));
                }
                self.require_open(src, date)?;
                self.require_open(dst, date)?;
                let taken = self.close(src, dst, date);
                self.municipalities.get_mut(dst).expect("checked open").muni.absorb_attributes(&taken);
            }
            LifecycleEvent::Cluster { srcs, new } => {
                for s in srcs {
                    self.require_open(s, date)?;
                }
                let target = self.municipalities.get(new).ok_or_else(|| DomainError::UnknownMunicipality(new.clone()))?;
                if target.status != MunicipalityStatus::Pending {
                    return Err(DomainError::ChainedEvent(new.clone(), date));
                }
                let mut merged = target.muni.clone();
                merged.clear_additive();
                for s in srcs {
                    let taken = self.close(s, new, date);
                    merged.absorb_attributes(&taken);
                }
                let t = self.municipalities.get_mut(new).expect("checked");
                t.muni = merged;
                t.status = MunicipalityStatus::Open;
                t.status_changed = Some(date);
            }
        }
        Ok(())
    }

    /// Open municipalities whose begin date has come and that are not the
    /// product of a cluster event.
    pub fn open_due(&mut self, date: NaiveDate, cluster_targets: &BTreeSet<MunicipalityId>) {
        for m in self.municipalities.values_mut() {
            if m.status == MunicipalityStatus::Pending && m.muni.begin_date <= date && !cluster_targets.contains(&m.muni.id) {
                m.status = MunicipalityStatus::Open;
                m.status_changed = Some(date);
            }
        }
    }

    /// Graph of open nodes, active sources and visible installed pipes on `date`.
    pub fn visible_network(&self, date: NaiveDate) -> VisibleNetwork {
        let mut nodes: Vec<VisibleNode> = self
            .open_municipalities()
            .map(|m| VisibleNode {
                id: m.muni.id.to_string(),
                kind: NodeKind::Municipality,
                latitude: m.muni.latitude,
                longitude: m.muni.longitude,
                elevation: m.muni.elevation,
                province: m.muni.province.clone(),
            })
            .collect();
        let mut sources = Vec::new();
        for s in self.sources.values().filter(|s| s.is_active(date)) {
            let host = self.resolve(&s.connected_municipality);
            if !self.is_open(host) {
                continue;
            }
            nodes.push(VisibleNode {
                id: s.id.to_string(),
                kind: NodeKind::Source,
                latitude: s.latitude,
                longitude: s.longitude,
                elevation: s.elevation,
                province: s.province.clone(),
            });
            sources.push((s.id.clone(), host.clone()));
        }
        let mut edges = Vec::new();
        for c in self.connections.values() {
            let Some(pipe) = &c.installed_pipe else { continue };
            if pipe.install_date > date {
                continue;
            }
            let a = self.resolve(&c.node_a);
            let b = self.resolve(&c.node_b);
            if a == b || !self.is_open(a) || !self.is_open(b) {
                continue;
            }
            edges.push(VisibleEdge {
                connection: c.id.clone(),
                node_a: a.clone(),
                node_b: b.clone(),
                length: c.distance,
                option: pipe.option_id.clone(),
                friction: pipe.current_friction,
            });
        }
        VisibleNetwork { nodes, edges, sources }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Municipality,
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibleNode {
    pub id: String,
    pub kind: NodeKind,
    pub latitude: f64,
    pub longitude: f64,
    pub elevation: f64,
    pub province: ProvinceId,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibleEdge {
    pub connection: ConnectionId,
    pub node_a: MunicipalityId,
    pub node_b: MunicipalityId,
    pub length: f64,
    pub option: PipeOptionId,
    pub friction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibleNetwork {
    /// Open municipalities in id order, then active sources in id order.
    pub nodes: Vec<VisibleNode>,
    pub edges: Vec<VisibleEdge>,
    /// Active source and the municipality node it feeds.
    pub sources: Vec<(SourceId, MunicipalityId)>,
}
