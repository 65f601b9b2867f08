//! Deterministic, seedable simulation and evaluation of staged masterplans
//! for regional drinking-water transport networks.

pub mod assets;
pub mod calendar;
pub mod demand;
pub mod demo;
pub mod domain;
pub mod economy;
pub mod engine;
pub mod hydraulics;
pub mod ids;
pub mod instance;
pub mod kpi;
pub mod nrw;
pub mod plan;
pub mod rundir;
pub mod scenario;
pub mod seed;

pub use domain::{SourceType, WorldState};
pub use engine::{reveal_history, run_stage, step_stage_boundary, EngineError, History, Progress, RunConfig, RunOutput, SimMode};
pub use hydraulics::{solve_step, HydraulicNetwork, PumpCurve, SolverOptions};
pub use ids::*;
pub use instance::{load_instance, parse_instance, Instance, InstanceError};
pub use kpi::{evaluate, KpiInputs, KpiReport, Slice};
pub use plan::{load_plan, parse_plan, validate_plan, Intervention, Masterplan, Violation, ViolationKind};
pub use rundir::{read_kpi_inputs, write_run_dir};
pub use scenario::ScenarioTrace;
