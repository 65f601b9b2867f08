//! Steady-state pressure-driven hydraulics.
//!
//! A network is a set of junctions with demand, fixed-head nodes (one per
//! active source), Darcy-Weisbach pipes and groups of identical parallel
//! pumps. [`solve_step`] computes one hour's steady state.

mod export;
mod pump;
mod solver;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use export::{to_inp, to_snapshot};
pub use pump::{hydraulic_power_kw, interpolate, pump_electric_power, CurveError, PumpCurve};
pub use solver::solve_step;

pub const WATER_DENSITY: f64 = 1000.0;
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HydraulicError {
    #[error("link {link} references a node that does not exist")]
    DanglingNode { link: String },
    #[error("pipe {pipe} has non-positive length, diameter or friction")]
    BadPipe { pipe: String },
    #[error("pump group {pump} needs at least one unit")]
    NoUnits { pump: String },
    #[error("pump group {pump}: {source}")]
    BadCurve { pump: String, source: CurveError },
    #[error("pumping station {pump} operates at {flow:.3} m3/h per unit, outside its tabulated curve [{min}, {max}]")]
    PumpOutOfRange { pump: String, flow: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    Junction(usize),
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Junction {
    pub id: String,
    pub elevation: f64,
    /// m³/h
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedHeadNode {
    pub id: String,
    pub head: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipe {
    pub id: String,
    pub from: Node,
    pub to: Node,
    pub length: f64,
    pub diameter: f64,
    /// Darcy friction factor, taken as constant.
    pub friction: f64,
}

/// Identical pumps in parallel; flow splits equally among units.
#[derive(Debug, Clone, PartialEq)]
pub struct PumpGroup {
    pub id: String,
    pub from: Node,
    pub to: Node,
    pub curve: Arc<PumpCurve>,
    pub units: u32,
    /// Upper bound on the group's total flow (m³/h), e.g. a daily budget.
    pub flow_cap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HydraulicNetwork {
    pub junctions: Vec<Junction>,
    pub fixed_heads: Vec<FixedHeadNode>,
    pub pipes: Vec<Pipe>,
    pub pumps: Vec<PumpGroup>,
}

impl HydraulicNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_junction(&mut self, id: impl Into<String>, elevation: f64, demand: f64) -> Node {
        self.junctions.push(Junction { id: id.into(), elevation, demand });
        Node::Junction(self.junctions.len() - 1)
    }

    pub fn add_fixed_head(&mut self, id: impl Into<String>, head: f64) -> Node {
        self.fixed_heads.push(FixedHeadNode { id: id.into(), head });
        Node::Fixed(self.fixed_heads.len() - 1)
    }

    pub fn add_pipe(
        &mut self,
        id: impl Into<String>,
        from: Node,
        to: Node,
        length: f64,
        diameter: f64,
        friction: f64,
    ) -> usize {
        self.pipes.push(Pipe { id: id.into(), from, to, length, diameter, friction });
        self.pipes.len() - 1
    }

    pub fn add_pump(
        &mut self,
        id: impl Into<String>,
        from: Node,
        to: Node,
        curve: Arc<PumpCurve>,
        units: u32,
        flow_cap: Option<f64>,
    ) -> usize {
        self.pumps.push(PumpGroup { id: id.into(), from, to, curve, units, flow_cap });
        self.pumps.len() - 1
    }

    pub fn validate(&self) -> Result<(), HydraulicError> {
        let exists = |n: Node| match n {
            Node::Junction(i) => i < self.junctions.len(),
            Node::Fixed(i) => i < self.fixed_heads.len(),
        };
        for p in &self.pipes {
            if !exists(p.from) || !exists(p.to) {
                return Err(HydraulicError::DanglingNode { link: p.id.clone() });
            }
            if !(p.length > 0.0 && p.diameter > 0.0 && p.friction > 0.0) {
                return Err(HydraulicError::BadPipe { pipe: p.id.clone() });
            }
        }
        for p in &self.pumps {
            if !exists(p.from) || !exists(p.to) {
                return Err(HydraulicError::DanglingNode { link: p.id.clone() });
            }
            if p.units == 0 {
                return Err(HydraulicError::NoUnits { pump: p.id.clone() });
            }
            p.curve
                .validate()
                .map_err(|source| HydraulicError::BadCurve { pump: p.id.clone(), source })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverOptions {
    /// Pressure at which the full demand is delivered (m).
    pub required_pressure: f64,
    pub pressure_exponent: f64,
    /// Convergence on the largest head update (m).
    pub head_tolerance: f64,
    /// Convergence on the largest nodal mass imbalance (m³/h).
    pub flow_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            required_pressure: 30.0,
            pressure_exponent: 0.5,
            head_tolerance: 1e-8,
            flow_tolerance: 5e-7,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JunctionResult {
    pub head: f64,
    pub pressure: f64,
    pub delivered: f64,
    pub undelivered: f64,
    /// inflow - outflow - delivered, m³/h
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipeResult {
    /// Signed, positive from `from` to `to`, m³/h.
    pub flow: f64,
    /// Head at `from` minus head at `to`.
    pub headloss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PumpResult {
    /// Total group flow, m³/h.
    pub flow: f64,
    pub head_gain: f64,
    pub hydraulic_kw: f64,
    pub electric_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HydraulicSolution {
    pub junctions: Vec<JunctionResult>,
    pub pipes: Vec<PipeResult>,
    pub pumps: Vec<PumpResult>,
    pub converged: bool,
    pub iterations: usize,
    pub max_residual: f64,
}

impl HydraulicSolution {
    pub fn total_demand(&self) -> f64 {
        self.junctions.iter().map(|j| j.delivered + j.undelivered).sum()
    }

    pub fn total_delivered(&self) -> f64 {
        self.junctions.iter().map(|j| j.delivered).sum()
    }

    pub fn total_electric_kw(&self) -> f64 {
        self.pumps.iter().map(|p| p.electric_kw).sum()
    }
}
