//! Signalized grid traffic simulation with cooperative emergency-vehicle
//! routing and attention-based multi-agent signal control.

pub mod agents;
pub mod baselines;
pub mod config;
pub mod error;
pub mod network;
pub mod neural;
pub mod planner;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod trainer;

pub use config::Config;
pub use error::{EntityKind, Error, Result};
pub use network::{build_grid, IntersectionId, LaneId, PhaseId, RoadGraph, Route, SegmentId, Side, Turn};
pub use scenario::{load_scenario, Flow, FlowSpec, Scenario, VehicleClass, VehicleId};
