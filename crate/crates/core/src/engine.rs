//! Deterministic fixed-step co-simulation loop: feeder physics, the
//! coordinator, local controllers, and DERs advance on their configured
//! cadences, exchanging payloads only through the message queue.

use serde::{Deserialize, Serialize};

use crate::comm::{
    Channel, ChannelCategory, ChannelKind, EntityId, FaultModel, Message, MessageQueue, Payload,
    SendOutcome,
};
use crate::controller::{
    compute_direction_signals, coordinator_dual_update, local_primal_update, DirectionSignal,
    DualState, GridServiceBounds, SensorLocation,
};
use crate::error::{CoreError, Result};
use crate::feeder::{
    build_synthetic_feeder, FeederModel, FeederSpec, GridMeasurement, MeasurementKind, NodalPq,
    Phase, PHASE_COUNT,
};
use crate::fleet::{
    build_fleet, feasible_set, fleet_from_specs, project_setpoint, step_battery_soc, CostBases,
    DerKind, DerState, DerUnit, DerUnitSpec,
};
use crate::profiles::{LoadProfile, PvProfile};

/// Default step-change ratios applied to the pre-disturbance VPP
/// setpoints (phase A up ~21%, B down ~25%, C down ~36%).
pub const DIST_SCALE_DEFAULT: [f64; PHASE_COUNT] = [1.17 / 0.97, 0.70 / 0.93, 0.61 / 0.95];

/// Mix a salt into a master seed to obtain independent RNG domains.
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined value.
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_FEEDER: u64 = 1;
const SALT_FLEET: u64 = 2;
const SALT_LOAD: u64 = 3;
const SALT_PV: u64 = 4;
const SALT_FAULT: u64 = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeederSource {
    Synthetic { node_count: usize, impedance_scale: f64 },
    File { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetSource {
    Synthetic { pv_count: usize, battery_fraction: f64 },
    File { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    /// Smooth seeded drift around nominal demand and availability.
    Synthetic,
    /// Constant nominal demand and constant availability.
    Flat,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsConfig {
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    /// Explicit pre-disturbance setpoints; when absent they are derived
    /// from the nominal demand and the fleet's initial injections.
    pub vpp_setpoint_mw: Option<[f64; PHASE_COUNT]>,
    pub vpp_halfwidth_mw: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            v_min_pu: 0.95,
            v_max_pu: 1.03,
            vpp_setpoint_mw: None,
            vpp_halfwidth_mw: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceConfig {
    pub time_s: f64,
    /// Explicit post-step setpoints; when absent `scale` multiplies the
    /// pre-disturbance setpoints.
    pub setpoints_mw: Option<[f64; PHASE_COUNT]>,
    pub scale: [f64; PHASE_COUNT],
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        DisturbanceConfig { time_s: 3600.0, setpoints_mw: None, scale: DIST_SCALE_DEFAULT }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcategory {
    Voltage,
    FeederHead,
    Setpoint,
    PqMeasurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKindTag {
    PacketLoss,
    LinkFailure,
    Delay,
}

/// One fault block of the scenario file.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FaultConfig {
    pub category: ChannelCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcategory: Option<Subcategory>,
    pub model: FaultKindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_drop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_fail: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downtime_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl FaultConfig {
    pub fn kinds(&self) -> Result<Vec<ChannelKind>> {
        use ChannelCategory as Cat;
        use ChannelKind as K;
        let kinds = match (self.category, self.subcategory) {
            (Cat::GridServiceMeasurement, None) => vec![K::FeederHeadMeasurement, K::VoltageMeasurement],
            (Cat::GridServiceMeasurement, Some(Subcategory::Voltage)) => vec![K::VoltageMeasurement],
            (Cat::GridServiceMeasurement, Some(Subcategory::FeederHead)) => vec![K::FeederHeadMeasurement],
            (Cat::DirectionSignal, None) => vec![K::DirectionSignal],
            (Cat::DerLink, None) => vec![K::SetpointToDer, K::PqMeasurementToController],
            (Cat::DerLink, Some(Subcategory::Setpoint)) => vec![K::SetpointToDer],
            (Cat::DerLink, Some(Subcategory::PqMeasurement)) => vec![K::PqMeasurementToController],
            (cat, Some(sub)) => {
                return Err(CoreError::invalid(format!(
                    "subcategory {sub:?} does not belong to category {cat:?}"
                )))
            }
        };
        Ok(kinds)
    }

    pub fn to_model(&self) -> Result<FaultModel> {
        let model = match self.model {
            FaultKindTag::PacketLoss => FaultModel::PacketLoss {
                p_drop: self
                    .p_drop
                    .ok_or_else(|| CoreError::invalid("packet_loss fault needs p_drop"))?,
            },
            FaultKindTag::LinkFailure => FaultModel::LinkFailure {
                p_fail: self
                    .p_fail
                    .ok_or_else(|| CoreError::invalid("link_failure fault needs p_fail"))?,
                downtime_s: self
                    .downtime_s
                    .ok_or_else(|| CoreError::invalid("link_failure fault needs downtime_s"))?,
            },
            FaultKindTag::Delay => FaultModel::Delay {
                latency_s: self
                    .latency_s
                    .ok_or_else(|| CoreError::invalid("delay fault needs latency_s"))?,
            },
        };
        model.validate()?;
        Ok(model)
    }
}

/// Full experiment configuration. All fields have desk-scale defaults, so
/// `Scenario::default()` (or `{}` as JSON) is the baseline scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub feeder: FeederSource,
    pub fleet: FleetSource,
    pub profiles: ProfileMode,
    pub horizon_s: f64,
    pub dt_grid_s: f64,
    pub coordinator_period_s: f64,
    pub measurement_period_s: f64,
    pub der_period_s: f64,
    /// Direction-signal send period; defaults to the coordinator period.
    pub direction_period_s: Option<f64>,
    pub bounds: BoundsConfig,
    pub disturbance: DisturbanceConfig,
    pub faults: Vec<FaultConfig>,
    pub master_seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub cost: CostBases,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            feeder: FeederSource::Synthetic { node_count: 96, impedance_scale: 0.05 },
            fleet: FleetSource::Synthetic { pv_count: 24, battery_fraction: 0.5 },
            profiles: ProfileMode::Synthetic,
            horizon_s: 7200.0,
            dt_grid_s: 2.0,
            coordinator_period_s: 60.0,
            measurement_period_s: 60.0,
            der_period_s: 10.0,
            direction_period_s: None,
            bounds: BoundsConfig::default(),
            disturbance: DisturbanceConfig::default(),
            faults: Vec::new(),
            master_seed: 1,
            alpha: 1.0,
            beta: 0.1,
            cost: CostBases::default(),
        }
    }
}

/// Scenario with all sources loaded and derived quantities fixed.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub scenario: Scenario,
    pub feeder: FeederModel,
    pub fleet: Vec<DerUnit>,
    pub load_profile: LoadProfile,
    pub pv_profile: PvProfile,
    pub sensors: Vec<SensorLocation>,
    /// Index into the fleet for each sensor (the PV that hosts it).
    pub sensor_units: Vec<usize>,
    pub initial_bounds: GridServiceBounds,
    pub disturbance_setpoints_mw: [f64; PHASE_COUNT],
    pub fault_base_seed: u64,
}

impl Scenario {
    pub fn from_json(json: &str) -> Result<Scenario> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon_s > 0.0) {
            return Err(CoreError::invalid("horizon must be positive"));
        }
        if !(self.dt_grid_s > 0.0) {
            return Err(CoreError::invalid("grid step must be positive"));
        }
        for (name, period) in [
            ("coordinator_period_s", self.coordinator_period_s),
            ("measurement_period_s", self.measurement_period_s),
            ("der_period_s", self.der_period_s),
            ("direction_period_s", self.direction_period_s.unwrap_or(self.coordinator_period_s)),
        ] {
            if !(period > 0.0) || period + 1e-12 < self.dt_grid_s {
                return Err(CoreError::invalid(format!(
                    "{name} must be positive and at least the grid step"
                )));
            }
        }
        if !(0.0..=self.horizon_s).contains(&self.disturbance.time_s) {
            return Err(CoreError::invalid("disturbance time must lie within the horizon"));
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(CoreError::invalid("alpha and beta must be positive"));
        }
        Ok(())
    }

    /// Load sources, derive setpoints, and validate everything that can
    /// fail before the loop starts.
    pub fn resolve(&self) -> Result<ResolvedScenario> {
        self.validate()?;

        let feeder = match &self.feeder {
            FeederSource::Synthetic { node_count, impedance_scale } => {
                build_synthetic_feeder(*node_count, derive_seed(self.master_seed, SALT_FEEDER), *impedance_scale)?
            }
            FeederSource::File { path } => {
                let text = std::fs::read_to_string(path)?;
                let spec: FeederSpec = serde_json::from_str(&text)?;
                FeederModel::from_spec(&spec)?
            }
        };

        let fleet = match &self.fleet {
            FleetSource::Synthetic { pv_count, battery_fraction } => build_fleet(
                &feeder,
                *pv_count,
                *battery_fraction,
                derive_seed(self.master_seed, SALT_FLEET),
                self.cost,
            )?,
            FleetSource::File { path } => {
                let text = std::fs::read_to_string(path)?;
                let specs: Vec<DerUnitSpec> = serde_json::from_str(&text)?;
                fleet_from_specs(&specs, feeder.node_count)?
            }
        };
        if fleet.is_empty() {
            return Err(CoreError::invalid("fleet must contain at least one unit"));
        }

        let (load_profile, pv_profile) = match self.profiles {
            ProfileMode::Synthetic => (
                LoadProfile::synthetic(&feeder, self.horizon_s, derive_seed(self.master_seed, SALT_LOAD))?,
                PvProfile::synthetic(self.horizon_s, derive_seed(self.master_seed, SALT_PV))?,
            ),
            ProfileMode::Flat => {
                (LoadProfile::flat(&feeder, self.horizon_s)?, PvProfile::flat(self.horizon_s, 0.72)?)
            }
        };

        let mut sensors = Vec::new();
        let mut sensor_units = Vec::new();
        for (i, unit) in fleet.iter().enumerate() {
            if unit.kind == DerKind::Pv {
                sensors.push(SensorLocation { phase: unit.phase, node: unit.node });
                sensor_units.push(i);
            }
        }
        if sensors.is_empty() {
            return Err(CoreError::invalid("fleet must contain at least one PV sensor"));
        }

        // Initial injections: PV at available power, batteries idle.
        let avail0 = pv_profile.availability_at(0.0);
        let mut inj0 = [0.0_f64; PHASE_COUNT];
        for unit in &fleet {
            if unit.kind == DerKind::Pv {
                inj0[unit.phase.index()] += unit.s_rating_kw * avail0 / 1000.0;
            }
        }
        let load0 = load_profile.total_phase_demand_at(0.0);
        let setpoints = self
            .bounds
            .vpp_setpoint_mw
            .unwrap_or_else(|| std::array::from_fn(|p| load0[p] - inj0[p]));

        let initial_bounds = GridServiceBounds {
            v_min_pu: self.bounds.v_min_pu,
            v_max_pu: self.bounds.v_max_pu,
            vpp_setpoint_mw: setpoints,
            vpp_halfwidth_mw: self.bounds.vpp_halfwidth_mw,
        };
        initial_bounds.validate()?;

        let disturbance_setpoints_mw = self
            .disturbance
            .setpoints_mw
            .unwrap_or_else(|| std::array::from_fn(|p| setpoints[p] * self.disturbance.scale[p]));

        for fault in &self.faults {
            fault.kinds()?;
            fault.to_model()?;
            if let Some(fraction) = fault.channel_fraction {
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(CoreError::invalid("channel_fraction must be in [0, 1]"));
                }
            }
        }

        Ok(ResolvedScenario {
            scenario: self.clone(),
            feeder,
            fleet,
            load_profile,
            pv_profile,
            sensors,
            sensor_units,
            initial_bounds,
            disturbance_setpoints_mw,
            fault_base_seed: derive_seed(self.master_seed, SALT_FAULT),
        })
    }
}

/// Cumulative message counters for one channel category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MsgCounters {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

/// One row of the simulation trace (one per grid step).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t_s: f64,
    /// Voltage magnitude at each monitored node, in sensor order.
    pub monitored_v_pu: Vec<f64>,
    pub p0_mw: [f64; PHASE_COUNT],
    /// VPP setpoints active at this step.
    pub vpp_setpoint_mw: [f64; PHASE_COUNT],
    pub mu_norm: f64,
    pub lambda_norm: f64,
    /// Applied setpoint per unit (kW, kVAr).
    pub setpoints_kw: Vec<(f64, f64)>,
    /// State of charge per unit (zero for PV).
    pub soc: Vec<f64>,
    pub msgs: [MsgCounters; 3],
}

/// Trace plus the metadata needed to judge functionality.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub records: Vec<TraceRecord>,
    pub dt_grid_s: f64,
    pub disturbance_time_s: f64,
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    pub vpp_halfwidth_mw: f64,
    pub unit_count: usize,
    pub sensor_count: usize,
}

/// Whether payloads travel through the fault-injected message queue or by
/// direct call (the transparency baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    Queued,
    Direct,
}

struct CoordinatorState {
    duals: DualState,
    /// Latest received voltage per sensor: (measurement timestamp, value).
    last_v: Vec<Option<(f64, f64)>>,
    last_p0: [Option<(f64, f64)>; PHASE_COUNT],
}

#[derive(Default, Clone)]
struct ControllerState {
    last_signal: Option<DirectionSignal>,
    /// PQ measurements delivered and not yet processed, in arrival order.
    pending_meas: Vec<(f64, f64)>,
}

struct Engine<'a> {
    resolved: &'a ResolvedScenario,
    mode: TransportMode,
    channels: Vec<Channel>,
    queue: MessageQueue,
    chan_feeder_head: [usize; PHASE_COUNT],
    chan_voltage: Vec<usize>,
    chan_direction: Vec<usize>,
    chan_setpoint: Vec<usize>,
    chan_pq: Vec<usize>,
    coordinator: CoordinatorState,
    controllers: Vec<ControllerState>,
    pending_setpoints: Vec<Vec<(f64, f64)>>,
    states: Vec<DerState>,
    active_bounds: GridServiceBounds,
    disturbance_applied: bool,
    counters: [MsgCounters; 3],
}

impl<'a> Engine<'a> {
    fn new(resolved: &'a ResolvedScenario, mode: TransportMode) -> Result<Self> {
        let s = &resolved.scenario;
        let n_units = resolved.fleet.len();
        let n_sensors = resolved.sensors.len();
        let seed = resolved.fault_base_seed;

        let mut channels = Vec::new();
        let add = |kind: ChannelKind, source: EntityId, dest: EntityId, channels: &mut Vec<Channel>| {
            let id = channels.len() as u32;
            channels.push(Channel::new(id, kind, source, dest, seed));
            id as usize
        };

        let chan_feeder_head = std::array::from_fn(|p| {
            add(
                ChannelKind::FeederHeadMeasurement,
                EntityId::Substation(Phase::from_index(p)),
                EntityId::Coordinator,
                &mut channels,
            )
        });
        let chan_voltage: Vec<usize> = (0..n_sensors)
            .map(|m| {
                add(
                    ChannelKind::VoltageMeasurement,
                    EntityId::Sensor(m as u32),
                    EntityId::Coordinator,
                    &mut channels,
                )
            })
            .collect();
        let chan_direction: Vec<usize> = (0..n_units)
            .map(|i| {
                add(
                    ChannelKind::DirectionSignal,
                    EntityId::Coordinator,
                    EntityId::Controller(i as u32),
                    &mut channels,
                )
            })
            .collect();
        let chan_setpoint: Vec<usize> = (0..n_units)
            .map(|i| {
                add(
                    ChannelKind::SetpointToDer,
                    EntityId::Controller(i as u32),
                    EntityId::Der(i as u32),
                    &mut channels,
                )
            })
            .collect();
        let chan_pq: Vec<usize> = (0..n_units)
            .map(|i| {
                add(
                    ChannelKind::PqMeasurementToController,
                    EntityId::Der(i as u32),
                    EntityId::Controller(i as u32),
                    &mut channels,
                )
            })
            .collect();

        // Attach fault models; each channel may carry at most one.
        if mode == TransportMode::Queued {
            for (idx, fault) in s.faults.iter().enumerate() {
                let model = fault.to_model()?;
                let fraction = fault.channel_fraction.unwrap_or(1.0);
                let config_seed =
                    fault.seed.unwrap_or_else(|| derive_seed(seed, 0x100 + idx as u64));
                for (k, kind) in fault.kinds()?.into_iter().enumerate() {
                    let ids: Vec<u32> = channels
                        .iter()
                        .filter(|c| c.kind == kind)
                        .map(|c| c.id)
                        .collect();
                    let chosen = crate::comm::select_faulty_channels(
                        &ids,
                        fraction,
                        derive_seed(config_seed, 0x200 + k as u64),
                    )?;
                    for id in chosen {
                        let ch = &mut channels[id as usize];
                        if ch.fault != FaultModel::None {
                            return Err(CoreError::invalid(format!(
                                "channel {id} already carries a fault model"
                            )));
                        }
                        ch.reseed(config_seed);
                        ch.set_fault(model)?;
                    }
                }
            }
        }

        // Initial conditions: PV at available power, batteries idle at
        // their preferred state of charge.
        let avail0 = resolved.pv_profile.availability_at(0.0);
        let states: Vec<DerState> = resolved
            .fleet
            .iter()
            .map(|unit| {
                let mut st = DerState::new(unit);
                if unit.kind == DerKind::Pv {
                    st.p_avail_kw = unit.s_rating_kw * avail0;
                    st.p_kw = st.p_avail_kw;
                }
                st.last_meas_p_kw = st.p_kw;
                st.last_meas_q_kvar = st.q_kvar;
                st
            })
            .collect();

        Ok(Engine {
            resolved,
            mode,
            channels,
            queue: MessageQueue::new(),
            chan_feeder_head,
            chan_voltage,
            chan_direction,
            chan_setpoint,
            chan_pq,
            coordinator: CoordinatorState {
                duals: DualState::new(n_sensors, s.alpha)?,
                last_v: vec![None; n_sensors],
                last_p0: [None; PHASE_COUNT],
            },
            controllers: vec![ControllerState::default(); n_units],
            pending_setpoints: vec![Vec::new(); n_units],
            states,
            active_bounds: resolved.initial_bounds,
            disturbance_applied: false,
            counters: [MsgCounters::default(); 3],
        })
    }

    fn category_index(cat: ChannelCategory) -> usize {
        match cat {
            ChannelCategory::GridServiceMeasurement => 0,
            ChannelCategory::DirectionSignal => 1,
            ChannelCategory::DerLink => 2,
        }
    }

    fn dispatch(&mut self, chan_idx: usize, payload: Payload, now: f64) -> Result<()> {
        match self.mode {
            TransportMode::Direct => {
                let kind = self.channels[chan_idx].kind;
                let dest = self.channels[chan_idx].dest;
                self.route(Message {
                    channel_id: chan_idx as u32,
                    kind,
                    dest,
                    payload,
                    created_at_s: now,
                    deliver_at_s: now,
                    delivered: true,
                });
            }
            TransportMode::Queued => {
                let cat = Self::category_index(self.channels[chan_idx].kind.category());
                let outcome = self.channels[chan_idx].send(&mut self.queue, payload, now)?;
                self.counters[cat].sent += 1;
                if outcome == SendOutcome::Dropped {
                    self.counters[cat].dropped += 1;
                }
            }
        }
        Ok(())
    }

    /// Pop due messages and hand each to its destination's inbox.
    fn pump(&mut self, now: f64) {
        if self.mode == TransportMode::Direct {
            return;
        }
        for msg in self.queue.deliver_due(now) {
            debug_assert!(msg.deliver_at_s <= now, "consumed a payload before its delivery time");
            let cat = Self::category_index(msg.kind.category());
            self.counters[cat].delivered += 1;
            self.route(msg);
        }
    }

    fn route(&mut self, msg: Message) {
        match msg.payload {
            Payload::Grid(m) => match m.kind {
                MeasurementKind::VoltageMagnitude { .. } => {
                    // Channel id encodes the sensor slot.
                    let sensor = msg.channel_id as usize - self.chan_voltage[0];
                    let keep = match self.coordinator.last_v[sensor] {
                        Some((ts, _)) => m.timestamp_s >= ts,
                        None => true,
                    };
                    if keep {
                        self.coordinator.last_v[sensor] = Some((m.timestamp_s, m.value));
                    }
                }
                MeasurementKind::FeederHeadPower => {
                    let phase = m.phase.index();
                    let keep = match self.coordinator.last_p0[phase] {
                        Some((ts, _)) => m.timestamp_s >= ts,
                        None => true,
                    };
                    if keep {
                        self.coordinator.last_p0[phase] = Some((m.timestamp_s, m.value));
                    }
                }
            },
            Payload::Direction(sig) => {
                let ctl = &mut self.controllers[sig.der_id as usize];
                let newer = ctl.last_signal.map_or(true, |prev| sig.issued_at_s >= prev.issued_at_s);
                if newer {
                    ctl.last_signal = Some(sig);
                }
            }
            Payload::PqMeasurement { der_id, p_kw, q_kvar } => {
                self.controllers[der_id as usize].pending_meas.push((p_kw, q_kvar));
            }
            Payload::Setpoint { der_id, p_kw, q_kvar } => {
                self.pending_setpoints[der_id as usize].push((p_kw, q_kvar));
            }
        }
    }

    fn run(&mut self) -> Result<SimOutput> {
        let s = &self.resolved.scenario;
        let dt = s.dt_grid_s;
        let der_dt = s.der_period_s;
        let direction_period = s.direction_period_s.unwrap_or(s.coordinator_period_s);
        let steps = (s.horizon_s / dt).floor() as usize;

        let mut next_meas = 0.0_f64;
        let mut next_coord = 0.0_f64;
        let mut next_direction = 0.0_f64;
        let mut next_der = 0.0_f64;

        let mut records = Vec::with_capacity(steps + 1);
        let fleet = &self.resolved.fleet;

        for step in 0..=steps {
            let now = step as f64 * dt;
            let eps = 1e-9 * dt;

            // (1) Exogenous state and feasibility upkeep.
            let loads = self.resolved.load_profile.demand_at(now);
            let avail = self.resolved.pv_profile.availability_at(now);
            for (unit, st) in fleet.iter().zip(self.states.iter_mut()) {
                if unit.kind == DerKind::Pv {
                    st.p_avail_kw = unit.s_rating_kw * avail;
                }
                let (p, q) = project_setpoint(unit, st, (st.p_kw, st.q_kvar), der_dt);
                st.p_kw = p;
                st.q_kvar = q;
            }

            // (2) Feeder physics.
            let mut injections = NodalPq::zeros(self.resolved.feeder.node_count);
            for (unit, st) in fleet.iter().zip(self.states.iter()) {
                let phase = unit.phase.index();
                injections.p_mw[phase][unit.node] += st.p_kw / 1000.0;
                injections.q_mvar[phase][unit.node] += st.q_kvar / 1000.0;
            }
            let voltages = self.resolved.feeder.compute_voltages(&injections, &loads)?;
            let p0 = self.resolved.feeder.compute_feeder_head_power(&injections, &loads)?;
            let monitored: Vec<f64> = self
                .resolved
                .sensors
                .iter()
                .map(|loc| voltages[loc.phase.index()][loc.node])
                .collect();

            // (3) Category-1 sends on the measurement cadence.
            if now + eps >= next_meas {
                next_meas += s.measurement_period_s;
                for phase in 0..PHASE_COUNT {
                    let payload = Payload::Grid(GridMeasurement {
                        timestamp_s: now,
                        kind: MeasurementKind::FeederHeadPower,
                        phase: Phase::from_index(phase),
                        value: p0[phase],
                    });
                    self.dispatch(self.chan_feeder_head[phase], payload, now)?;
                }
                for (m, loc) in self.resolved.sensors.iter().enumerate() {
                    let payload = Payload::Grid(GridMeasurement {
                        timestamp_s: now,
                        kind: MeasurementKind::VoltageMagnitude { node: loc.node },
                        phase: loc.phase,
                        value: monitored[m],
                    });
                    self.dispatch(self.chan_voltage[m], payload, now)?;
                }
            }

            // (4) Coordinator: ingest due messages, ascend duals, emit
            // direction signals on the direction cadence.
            self.pump(now);
            if now + eps >= next_coord {
                next_coord += s.coordinator_period_s;
                let v_view: Vec<Option<f64>> =
                    self.coordinator.last_v.iter().map(|e| e.map(|(_, v)| v)).collect();
                let p0_view: [Option<f64>; PHASE_COUNT] =
                    std::array::from_fn(|p| self.coordinator.last_p0[p].map(|(_, v)| v));
                coordinator_dual_update(
                    &mut self.coordinator.duals,
                    &self.active_bounds,
                    &v_view,
                    &p0_view,
                );
            }
            if now + eps >= next_direction {
                next_direction += direction_period;
                let signals = compute_direction_signals(
                    &self.coordinator.duals,
                    &self.resolved.feeder,
                    &self.resolved.sensors,
                    fleet,
                    now,
                );
                for sig in signals {
                    let chan = self.chan_direction[sig.der_id as usize];
                    self.dispatch(chan, Payload::Direction(sig), now)?;
                }
            }

            // (5) DER link: DERs publish PQ measurements; controllers that
            // received one take a primal step and send the setpoint back;
            // DERs apply delivered setpoints after projection.
            self.pump(now);
            if now + eps >= next_der {
                next_der += s.der_period_s;
                for i in 0..fleet.len() {
                    let payload = Payload::PqMeasurement {
                        der_id: i as u32,
                        p_kw: self.states[i].p_kw,
                        q_kvar: self.states[i].q_kvar,
                    };
                    self.dispatch(self.chan_pq[i], payload, now)?;
                }
            }
            self.pump(now);
            for i in 0..fleet.len() {
                let pending = std::mem::take(&mut self.controllers[i].pending_meas);
                for meas in pending {
                    self.states[i].last_meas_p_kw = meas.0;
                    self.states[i].last_meas_q_kvar = meas.1;
                    let signal = self.controllers[i].last_signal;
                    let next = local_primal_update(
                        &fleet[i],
                        &self.states[i],
                        signal.as_ref(),
                        meas,
                        s.beta,
                        der_dt,
                    );
                    let payload =
                        Payload::Setpoint { der_id: i as u32, p_kw: next.0, q_kvar: next.1 };
                    self.dispatch(self.chan_setpoint[i], payload, now)?;
                }
            }
            self.pump(now);
            for i in 0..fleet.len() {
                let pending = std::mem::take(&mut self.pending_setpoints[i]);
                for sp in pending {
                    let applied = project_setpoint(&fleet[i], &self.states[i], sp, der_dt);
                    self.states[i].p_kw = applied.0;
                    self.states[i].q_kvar = applied.1;
                }
            }

            // (6) Battery energy bookkeeping.
            for (unit, st) in fleet.iter().zip(self.states.iter_mut()) {
                if unit.kind == DerKind::Battery {
                    st.soc = step_battery_soc(unit, st, dt)?;
                }
            }

            // (7) Step disturbance on the VPP setpoints.
            if !self.disturbance_applied && now + eps >= s.disturbance.time_s {
                self.disturbance_applied = true;
                self.active_bounds.vpp_setpoint_mw = self.resolved.disturbance_setpoints_mw;
            }

            // (8) Trace record; every applied setpoint must be feasible.
            #[cfg(debug_assertions)]
            for (unit, st) in fleet.iter().zip(self.states.iter()) {
                debug_assert!(
                    feasible_set(unit, st, der_dt).contains(st.p_kw, st.q_kvar),
                    "infeasible setpoint on unit {}",
                    unit.id
                );
            }
            records.push(TraceRecord {
                t_s: now,
                monitored_v_pu: monitored,
                p0_mw: p0,
                vpp_setpoint_mw: self.active_bounds.vpp_setpoint_mw,
                mu_norm: self.coordinator.duals.mu_norm(),
                lambda_norm: self.coordinator.duals.lambda_norm(),
                setpoints_kw: self.states.iter().map(|st| (st.p_kw, st.q_kvar)).collect(),
                soc: self.states.iter().map(|st| st.soc).collect(),
                msgs: self.counters,
            });
        }

        Ok(SimOutput {
            records,
            dt_grid_s: dt,
            disturbance_time_s: s.disturbance.time_s,
            v_min_pu: s.bounds.v_min_pu,
            v_max_pu: s.bounds.v_max_pu,
            vpp_halfwidth_mw: s.bounds.vpp_halfwidth_mw,
            unit_count: fleet.len(),
            sensor_count: self.resolved.sensors.len(),
        })
    }
}

/// Run a scenario through the fault-injected transport.
pub fn run_scenario(scenario: &Scenario) -> Result<SimOutput> {
    let resolved = scenario.resolve()?;
    run_resolved(&resolved, TransportMode::Queued)
}

/// Run a scenario with communication bypassed (direct calls); fault
/// configuration is ignored in this mode.
pub fn run_scenario_direct(scenario: &Scenario) -> Result<SimOutput> {
    let resolved = scenario.resolve()?;
    run_resolved(&resolved, TransportMode::Direct)
}

pub fn run_resolved(resolved: &ResolvedScenario, mode: TransportMode) -> Result<SimOutput> {
    Engine::new(resolved, mode)?.run()
}

/// Compare the physical trajectories of two runs, ignoring message
/// counters (which a direct-call run does not accumulate).
pub fn trajectories_identical(a: &SimOutput, b: &SimOutput) -> bool {
    a.records.len() == b.records.len()
        && a.records.iter().zip(b.records.iter()).all(|(ra, rb)| {
            ra.t_s == rb.t_s
                && ra.monitored_v_pu == rb.monitored_v_pu
                && ra.p0_mw == rb.p0_mw
                && ra.vpp_setpoint_mw == rb.vpp_setpoint_mw
                && ra.mu_norm == rb.mu_norm
                && ra.lambda_norm == rb.lambda_norm
                && ra.setpoints_kw == rb.setpoints_kw
                && ra.soc == rb.soc
        })
}

/// Render the trace as CSV with a stable header. `comment` lines (resolved
/// configuration, seed) are prefixed with `#`.
pub fn trace_csv(output: &SimOutput, per_der: bool, comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str("t_s,v_min_meas,v_max_meas,p0_a_mw,p0_b_mw,p0_c_mw,mu_norm,lambda_norm,msgs_sent,msgs_dropped,msgs_delivered");
    if per_der {
        for i in 0..output.unit_count {
            out.push_str(&format!(",der{i}_p_kw,der{i}_q_kvar"));
        }
    }
    out.push('\n');
    for r in &output.records {
        let v_min = r.monitored_v_pu.iter().cloned().fold(f64::INFINITY, f64::min);
        let v_max = r.monitored_v_pu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sent: u64 = r.msgs.iter().map(|c| c.sent).sum();
        let dropped: u64 = r.msgs.iter().map(|c| c.dropped).sum();
        let delivered: u64 = r.msgs.iter().map(|c| c.delivered).sum();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t_s,
            v_min,
            v_max,
            r.p0_mw[0],
            r.p0_mw[1],
            r.p0_mw[2],
            r.mu_norm,
            r.lambda_norm,
            sent,
            dropped,
            delivered
        ));
        if per_der {
            for (p, q) in &r.setpoints_kw {
                out.push_str(&format!(",{p},{q}"));
            }
        }
        out.push('\n');
    }
    out
}
