//! Core library for a hierarchical primal-dual DER management simulator:
//! a linearized three-phase feeder, a fleet of PV and battery inverters,
//! the coordinator/local-controller control law, a deterministic
//! co-simulation loop with fault-injectable communication channels, and a
//! harness that searches for the fault severity limits at which the
//! system stops meeting its grid-service bounds.

pub mod comm;
pub mod controller;
pub mod engine;
pub mod error;
pub mod feeder;
pub mod fleet;
pub mod metrics;
pub mod profiles;

pub use comm::{Channel, ChannelCategory, ChannelKind, FaultModel, Message, MessageQueue};
pub use controller::{DirectionSignal, DualState, GridServiceBounds, SensorLocation};
pub use engine::{
    run_scenario, run_scenario_direct, trace_csv, FaultConfig, Scenario, SimOutput, TraceRecord,
};
pub use error::{CoreError, Result};
pub use feeder::{FeederModel, FeederSpec, GridMeasurement, NodalPq, Phase};
pub use fleet::{CostBases, DerKind, DerState, DerUnit, DerUnitSpec};
pub use metrics::{
    find_limit, functional_fraction, is_functional, run_campaign, CampaignConfig, ExperimentKind,
    FaultExperiment, FaultTarget, FunctionalityMetric, LimitResult,
};
