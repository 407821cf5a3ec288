//! Curtailable PV and battery models: feasible setpoint sets, quadratic
//! local costs, and state-of-charge bookkeeping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::feeder::{FeederModel, Phase, PHASE_COUNT};

/// PV capacity draw range (kW), log-uniform.
pub const PV_CAPACITY_KW: (f64, f64) = (0.04, 34.0);
/// Battery energy capacity draw range (kWh), uniform.
pub const BATTERY_CAPACITY_KWH: (f64, f64) = (13.5, 54.0);
/// Battery power rating relative to energy capacity (2-hour battery).
const BATTERY_RATING_HOURS: f64 = 2.0;
/// State-of-charge operating band enforced by the feasible set.
pub const SOC_MIN: f64 = 0.05;
pub const SOC_MAX: f64 = 0.95;
const DEFAULT_SOC_PREF: f64 = 0.5;

/// Base (per-kW / per-kWh) quadratic cost coefficients; the per-unit
/// coefficients are these bases scaled by the unit's capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBases {
    pub base_cp: f64,
    pub base_cq: f64,
    pub base_cs: f64,
}

impl Default for CostBases {
    fn default() -> Self {
        CostBases { base_cp: 0.005, base_cq: 0.005, base_cs: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerKind {
    Pv,
    Battery,
}

/// A controllable DER: a curtailable PV inverter or a battery inverter.
#[derive(Debug, Clone, PartialEq)]
pub struct DerUnit {
    pub id: u32,
    pub node: usize,
    pub phase: Phase,
    pub kind: DerKind,
    /// Apparent-power capacity (kVA).
    pub s_rating_kw: f64,
    /// Real-power limit (kW); equals the apparent rating here.
    pub p_rating_kw: f64,
    /// Energy capacity (kWh); batteries only.
    pub e_capacity_kwh: f64,
    /// Preferred state of charge (fraction); batteries only.
    pub soc_pref: f64,
    pub cost_cp: f64,
    pub cost_cq: f64,
    pub cost_cs: f64,
}

impl DerUnit {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_rating_kw > 0.0) {
            return Err(CoreError::invalid(format!("unit {}: s_rating must be positive", self.id)));
        }
        if self.cost_cp < 0.0 || self.cost_cq < 0.0 || self.cost_cs < 0.0 {
            return Err(CoreError::invalid(format!("unit {}: cost coefficients must be >= 0", self.id)));
        }
        if self.kind == DerKind::Battery {
            if !(self.e_capacity_kwh > 0.0) {
                return Err(CoreError::invalid(format!("unit {}: battery needs e_capacity > 0", self.id)));
            }
            if !(self.soc_pref > 0.0 && self.soc_pref < 1.0) {
                return Err(CoreError::invalid(format!("unit {}: soc_pref must be in (0, 1)", self.id)));
            }
        }
        Ok(())
    }
}

/// Live state of one DER.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerState {
    /// Applied setpoint (kW, kVAr); positive p injects into the grid
    /// (battery discharge).
    pub p_kw: f64,
    pub q_kvar: f64,
    /// Available PV power (kW); PV only.
    pub p_avail_kw: f64,
    /// State of charge (fraction); batteries only.
    pub soc: f64,
    /// Most recent injection measurement (kW, kVAr).
    pub last_meas_p_kw: f64,
    pub last_meas_q_kvar: f64,
}

impl DerState {
    pub fn new(unit: &DerUnit) -> Self {
        DerState {
            p_kw: 0.0,
            q_kvar: 0.0,
            p_avail_kw: 0.0,
            soc: if unit.kind == DerKind::Battery { unit.soc_pref } else { 0.0 },
            last_meas_p_kw: 0.0,
            last_meas_q_kvar: 0.0,
        }
    }
}

/// Bounds descriptor for the feasible setpoint set: a real-power interval
/// intersected with the apparent-power disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibleSet {
    pub p_min_kw: f64,
    pub p_max_kw: f64,
    pub s_rating_kw: f64,
}

impl FeasibleSet {
    pub fn contains(&self, p_kw: f64, q_kvar: f64) -> bool {
        let tol = 1e-9 * self.s_rating_kw.max(1.0);
        p_kw >= self.p_min_kw - tol
            && p_kw <= self.p_max_kw + tol
            && p_kw * p_kw + q_kvar * q_kvar <= self.s_rating_kw * self.s_rating_kw + tol * self.s_rating_kw.max(1.0)
    }
}

/// Feasible setpoints for one control interval of `control_dt_s` seconds.
///
/// PV: `0 <= p <= p_avail`, `p^2 + q^2 <= s^2`. Battery: rated power box,
/// the apparent-power disk, and `p` limited so the state of charge stays
/// inside `[SOC_MIN, SOC_MAX]` after one interval.
pub fn feasible_set(unit: &DerUnit, state: &DerState, control_dt_s: f64) -> FeasibleSet {
    match unit.kind {
        DerKind::Pv => FeasibleSet {
            p_min_kw: 0.0,
            p_max_kw: state.p_avail_kw.min(unit.p_rating_kw).max(0.0),
            s_rating_kw: unit.s_rating_kw,
        },
        DerKind::Battery => {
            // soc' = soc - p dt / (3600 E); keep soc' inside the band.
            let to_power = 3600.0 * unit.e_capacity_kwh / control_dt_s;
            let p_max_soc = (state.soc - SOC_MIN) * to_power;
            let p_min_soc = (state.soc - SOC_MAX) * to_power;
            let p_max = unit.p_rating_kw.min(p_max_soc);
            let p_min = (-unit.p_rating_kw).max(p_min_soc);
            FeasibleSet {
                p_min_kw: p_min.min(p_max),
                p_max_kw: p_max,
                s_rating_kw: unit.s_rating_kw,
            }
        }
    }
}

/// Project a candidate setpoint onto the feasible set, clamping `p` to its
/// interval first and then `q` to the remaining apparent-power headroom.
pub fn project_setpoint(unit: &DerUnit, state: &DerState, candidate: (f64, f64), control_dt_s: f64) -> (f64, f64) {
    let fs = feasible_set(unit, state, control_dt_s);
    let p = candidate.0.clamp(fs.p_min_kw, fs.p_max_kw);
    let q_cap = (fs.s_rating_kw * fs.s_rating_kw - p * p).max(0.0).sqrt();
    let q = candidate.1.clamp(-q_cap, q_cap);
    (p, q)
}

/// Gradient of the unit's local quadratic cost at the given setpoint.
///
/// PV pays for curtailing below available power; a battery pays for
/// diverging its state of charge (after one `dt_s` interval at this
/// setpoint) from its preferred value. Both pay for reactive output.
pub fn cost_gradient(unit: &DerUnit, state: &DerState, setpoint: (f64, f64), dt_s: f64) -> (f64, f64) {
    let (p, q) = setpoint;
    match unit.kind {
        DerKind::Pv => (
            2.0 * unit.cost_cp * (p - state.p_avail_kw),
            2.0 * unit.cost_cq * q,
        ),
        DerKind::Battery => {
            let per_kw = dt_s / (3600.0 * unit.e_capacity_kwh);
            let soc_next = state.soc - p * per_kw;
            (
                -2.0 * unit.cost_cs * (soc_next - unit.soc_pref) * per_kw,
                2.0 * unit.cost_cq * q,
            )
        }
    }
}

/// Advance a battery's state of charge by `dt_s` seconds at its current
/// setpoint. Positive setpoints discharge.
pub fn step_battery_soc(unit: &DerUnit, state: &DerState, dt_s: f64) -> Result<f64> {
    if unit.kind != DerKind::Battery {
        return Err(CoreError::invalid(format!("unit {} is not a battery", unit.id)));
    }
    let soc = state.soc - state.p_kw * dt_s / (3600.0 * unit.e_capacity_kwh);
    Ok(soc.clamp(0.0, 1.0))
}

/// Build a synthetic fleet on the feeder: `pv_count` PV units at distinct
/// node/phase slots, a `battery_fraction` share of them paired with a
/// battery at the same slot. Cost coefficients are the bases scaled by
/// each unit's capacity. Deterministic per seed.
///
/// Capacities are assigned to phases in a snake order so per-phase fleet
/// power stays balanced across seeds.
pub fn build_fleet(
    feeder: &FeederModel,
    pv_count: usize,
    battery_fraction: f64,
    seed: u64,
    costs: CostBases,
) -> Result<Vec<DerUnit>> {
    if pv_count == 0 {
        return Err(CoreError::invalid("pv_count must be positive"));
    }
    if pv_count > feeder.node_count * PHASE_COUNT {
        return Err(CoreError::invalid(format!(
            "pv_count {} exceeds available node/phase slots {}",
            pv_count,
            feeder.node_count * PHASE_COUNT
        )));
    }
    if !(0.0..=1.0).contains(&battery_fraction) {
        return Err(CoreError::invalid("battery_fraction must be in [0, 1]"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (lo, hi) = PV_CAPACITY_KW;
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let mut capacities: Vec<f64> = (0..pv_count)
        .map(|_| rng.gen_range(ln_lo..=ln_hi).exp())
        .collect();
    capacities.sort_by(|a, b| b.partial_cmp(a).unwrap());

    // Largest units first, phases in snake order: A B C C B A A B C ...
    let snake = |i: usize| -> Phase {
        let round = i / PHASE_COUNT;
        let pos = i % PHASE_COUNT;
        Phase::from_index(if round % 2 == 0 { pos } else { PHASE_COUNT - 1 - pos })
    };

    let mut free_nodes: [Vec<usize>; PHASE_COUNT] =
        std::array::from_fn(|_| (0..feeder.node_count).collect());
    let mut units = Vec::with_capacity(pv_count * 2);
    for (i, &cap) in capacities.iter().enumerate() {
        let phase = snake(i);
        let free = &mut free_nodes[phase.index()];
        if free.is_empty() {
            return Err(CoreError::invalid("ran out of node slots on a phase"));
        }
        let node = free.swap_remove(rng.gen_range(0..free.len()));
        units.push(DerUnit {
            id: i as u32,
            node,
            phase,
            kind: DerKind::Pv,
            s_rating_kw: cap,
            p_rating_kw: cap,
            e_capacity_kwh: 0.0,
            soc_pref: 0.0,
            cost_cp: costs.base_cp * cap,
            cost_cq: costs.base_cq * cap,
            cost_cs: 0.0,
        });
    }

    // Pair every other PV (in descending-capacity order) with a battery so
    // storage also spreads evenly over phases and unit sizes.
    let battery_count = (battery_fraction * pv_count as f64).round() as usize;
    let mut next_id = pv_count as u32;
    let (e_lo, e_hi) = BATTERY_CAPACITY_KWH;
    let hosts = (0..pv_count).step_by(2).chain((1..pv_count).step_by(2));
    for host in hosts.take(battery_count) {
        let (node, phase) = (units[host].node, units[host].phase);
        let e_capacity = rng.gen_range(e_lo..=e_hi);
        let rating = e_capacity / BATTERY_RATING_HOURS;
        units.push(DerUnit {
            id: next_id,
            node,
            phase,
            kind: DerKind::Battery,
            s_rating_kw: rating,
            p_rating_kw: rating,
            e_capacity_kwh: e_capacity,
            soc_pref: DEFAULT_SOC_PREF,
            cost_cp: 0.0,
            cost_cq: costs.base_cq * rating,
            cost_cs: costs.base_cs * e_capacity,
        });
        next_id += 1;
    }

    for u in &units {
        u.validate()?;
    }
    Ok(units)
}

/// On-disk fleet entry matching the fleet JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerUnitSpec {
    pub id: u32,
    pub node: usize,
    pub phase: Phase,
    pub kind: DerKind,
    pub s_rating_kw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_capacity_kwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soc_pref: Option<f64>,
    pub cost_cp: f64,
    pub cost_cq: f64,
    pub cost_cs: f64,
}

pub fn fleet_to_specs(units: &[DerUnit]) -> Vec<DerUnitSpec> {
    units
        .iter()
        .map(|u| DerUnitSpec {
            id: u.id,
            node: u.node,
            phase: u.phase,
            kind: u.kind,
            s_rating_kw: u.s_rating_kw,
            e_capacity_kwh: (u.kind == DerKind::Battery).then_some(u.e_capacity_kwh),
            soc_pref: (u.kind == DerKind::Battery).then_some(u.soc_pref),
            cost_cp: u.cost_cp,
            cost_cq: u.cost_cq,
            cost_cs: u.cost_cs,
        })
        .collect()
}

pub fn fleet_from_specs(specs: &[DerUnitSpec], node_count: usize) -> Result<Vec<DerUnit>> {
    let mut units = Vec::with_capacity(specs.len());
    for s in specs {
        if s.node >= node_count {
            return Err(CoreError::invalid(format!(
                "unit {}: node {} out of range (feeder has {} nodes)",
                s.id, s.node, node_count
            )));
        }
        let unit = DerUnit {
            id: s.id,
            node: s.node,
            phase: s.phase,
            kind: s.kind,
            s_rating_kw: s.s_rating_kw,
            p_rating_kw: s.s_rating_kw,
            e_capacity_kwh: s.e_capacity_kwh.unwrap_or(0.0),
            soc_pref: s.soc_pref.unwrap_or(DEFAULT_SOC_PREF),
            cost_cp: s.cost_cp,
            cost_cq: s.cost_cq,
            cost_cs: s.cost_cs,
        };
        unit.validate()?;
        units.push(unit);
    }
    Ok(units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::build_synthetic_feeder;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(s_rating: f64) -> DerUnit {
        DerUnit {
            id: 0,
            node: 1,
            phase: Phase::A,
            kind: DerKind::Pv,
            s_rating_kw: s_rating,
            p_rating_kw: s_rating,
            e_capacity_kwh: 0.0,
            soc_pref: 0.0,
            cost_cp: 0.005 * s_rating,
            cost_cq: 0.005 * s_rating,
            cost_cs: 0.0,
        }
    }

    fn battery(e_capacity: f64) -> DerUnit {
        let rating = e_capacity / BATTERY_RATING_HOURS;
        DerUnit {
            id: 1,
            node: 1,
            phase: Phase::A,
            kind: DerKind::Battery,
            s_rating_kw: rating,
            p_rating_kw: rating,
            e_capacity_kwh: e_capacity,
            soc_pref: 0.5,
            cost_cp: 0.0,
            cost_cq: 0.005 * rating,
            cost_cs: 0.01 * e_capacity,
        }
    }

    fn pv_state(p_avail: f64) -> DerState {
        DerState { p_avail_kw: p_avail, ..DerState::new(&pv(1.0)) }
    }

    fn battery_state(soc: f64) -> DerState {
        DerState { soc, ..DerState::new(&battery(27.0)) }
    }

    #[test]
    fn pv_feasibility_boundary() {
        let unit = pv(10.0);
        let state = pv_state(10.0);
        let fs = feasible_set(&unit, &state, 10.0);
        assert!(fs.contains(10.0, 0.0));
        assert!(!fs.contains(10.0, 1.0));
        assert!(!fs.contains(-0.5, 0.0));
    }

    #[test]
    fn battery_soc_cap_blocks_charging() {
        let unit = battery(27.0);
        let state = battery_state(0.95);
        let fs = feasible_set(&unit, &state, 10.0);
        // At the top of the band, any charging (p < 0) is infeasible.
        assert_eq!(fs.p_min_kw, 0.0);
        assert!(!fs.contains(-0.1, 0.0));
        assert!(fs.contains(0.0, 0.0));
    }

    #[test]
    fn feasibility_matches_brute_force_predicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dt = 10.0;
        for trial in 0..500 {
            let (unit, state) = if trial % 2 == 0 {
                let u = pv(rng.gen_range(0.1..30.0));
                let avail = rng.gen_range(0.0..u.s_rating_kw);
                (u, pv_state(avail))
            } else {
                let u = battery(rng.gen_range(13.5..54.0));
                let soc = rng.gen_range(0.0..1.0);
                (u, battery_state(soc))
            };
            let fs = feasible_set(&unit, &state, dt);
            let span = 2.5 * unit.s_rating_kw;
            let p = rng.gen_range(-span..span);
            let q = rng.gen_range(-span..span);
            // Re-evaluate the constraints directly from the definitions.
            let expected = match unit.kind {
                DerKind::Pv => {
                    p >= 0.0
                        && p <= state.p_avail_kw
                        && p * p + q * q <= unit.s_rating_kw * unit.s_rating_kw
                }
                DerKind::Battery => {
                    let soc_next = state.soc - p * dt / (3600.0 * unit.e_capacity_kwh);
                    p.abs() <= unit.p_rating_kw
                        && p * p + q * q <= unit.s_rating_kw * unit.s_rating_kw
                        && (SOC_MIN..=SOC_MAX).contains(&soc_next)
                }
            };
            // Skip points within the feasibility tolerance band.
            let on_boundary = (p * p + q * q - unit.s_rating_kw * unit.s_rating_kw).abs()
                < 1e-6 * unit.s_rating_kw.max(1.0);
            if !on_boundary {
                assert_eq!(fs.contains(p, q), expected, "unit {:?} p={p} q={q}", unit.kind);
            }
        }
    }

    #[test]
    fn projection_identity_on_feasible_points() {
        let unit = pv(10.0);
        let state = pv_state(8.0);
        let cand = (5.0, 3.0);
        assert_eq!(project_setpoint(&unit, &state, cand, 10.0), cand);
    }

    #[test]
    fn projection_clamps_box_then_disk() {
        let unit = pv(10.0);
        let state = pv_state(10.0);
        assert_eq!(project_setpoint(&unit, &state, (12.0, 0.0), 10.0), (10.0, 0.0));
        let (p, q) = project_setpoint(&unit, &state, (6.0, 9.0), 10.0);
        assert_eq!(p, 6.0);
        assert_abs_diff_eq!(q, 8.0, epsilon = 1e-12);
    }

    // Grid oracle for the sequential (box-then-disk) projection: stage one
    // scans feasible p values for the closest to the candidate, stage two
    // scans feasible q values at the projected p. The closed form must tie
    // or beat the grid in each stage and must land inside the set.
    #[test]
    fn projection_beats_grid_oracle_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dt = 10.0;
        for trial in 0..1000 {
            let (unit, state) = if trial % 2 == 0 {
                let u = pv(rng.gen_range(0.5..34.0));
                let avail = rng.gen_range(0.0..u.s_rating_kw);
                (u, pv_state(avail))
            } else {
                let u = battery(rng.gen_range(13.5..54.0));
                let soc = rng.gen_range(0.02..0.98);
                (u, battery_state(soc))
            };
            let span = 2.0 * unit.s_rating_kw;
            let cand = (rng.gen_range(-span..span), rng.gen_range(-span..span));
            let out = project_setpoint(&unit, &state, cand, dt);

            let fs = feasible_set(&unit, &state, dt);
            assert!(fs.contains(out.0, out.1), "projection left the feasible set");

            let tol = 1e-9 * unit.s_rating_kw.max(1.0);
            let n = 400;
            let mut best_dp = f64::INFINITY;
            for k in 0..=n {
                let p = fs.p_min_kw + (fs.p_max_kw - fs.p_min_kw) * k as f64 / n as f64;
                best_dp = best_dp.min((p - cand.0).abs());
            }
            assert!((out.0 - cand.0).abs() <= best_dp + tol);

            let q_cap = (fs.s_rating_kw * fs.s_rating_kw - out.0 * out.0).max(0.0).sqrt();
            let mut best_dq = f64::INFINITY;
            for k in 0..=n {
                let q = -q_cap + 2.0 * q_cap * k as f64 / n as f64;
                best_dq = best_dq.min((q - cand.1).abs());
            }
            assert!((out.1 - cand.1).abs() <= best_dq + tol);

            // Idempotence is exact.
            let again = project_setpoint(&unit, &state, out, dt);
            assert_eq!(again, out);
        }
    }

    #[test]
    fn cost_gradient_zero_at_minima() {
        let unit = pv(10.0);
        let state = pv_state(7.5);
        assert_eq!(cost_gradient(&unit, &state, (7.5, 0.0), 10.0), (0.0, 0.0));

        let unit = battery(27.0);
        let state = battery_state(unit.soc_pref);
        assert_eq!(cost_gradient(&unit, &state, (0.0, 0.0), 10.0), (0.0, 0.0));
    }

    #[test]
    fn cost_gradient_matches_central_differences() {
        // The costs are quadratic, so central differences are exact up to
        // rounding; 1e-6 relative is generous.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dt = 10.0;
        for trial in 0..1000 {
            let (unit, state) = if trial % 2 == 0 {
                let u = pv(rng.gen_range(0.5..34.0));
                let avail = rng.gen_range(0.0..u.s_rating_kw);
                (u, pv_state(avail))
            } else {
                let u = battery(rng.gen_range(13.5..54.0));
                let soc = rng.gen_range(0.1..0.9);
                (u, battery_state(soc))
            };
            let p = rng.gen_range(-unit.s_rating_kw..unit.s_rating_kw);
            let q = rng.gen_range(-unit.s_rating_kw..unit.s_rating_kw);
            let cost = |p: f64, q: f64| -> f64 {
                match unit.kind {
                    DerKind::Pv => {
                        unit.cost_cp * (p - state.p_avail_kw).powi(2) + unit.cost_cq * q * q
                    }
                    DerKind::Battery => {
                        let soc_next = state.soc - p * dt / (3600.0 * unit.e_capacity_kwh);
                        unit.cost_cs * (soc_next - unit.soc_pref).powi(2) + unit.cost_cq * q * q
                    }
                }
            };
            let (gp, gq) = cost_gradient(&unit, &state, (p, q), dt);
            let h = 1e-4 * unit.s_rating_kw.max(1.0);
            let fd_p = (cost(p + h, q) - cost(p - h, q)) / (2.0 * h);
            let fd_q = (cost(p, q + h) - cost(p, q - h)) / (2.0 * h);
            let denom_p = gp.abs().max(fd_p.abs()).max(1e-9);
            let denom_q = gq.abs().max(fd_q.abs()).max(1e-9);
            assert!((gp - fd_p).abs() / denom_p <= 1e-6, "p gradient off: {gp} vs {fd_p}");
            assert!((gq - fd_q).abs() / denom_q <= 1e-6, "q gradient off: {gq} vs {fd_q}");
        }
    }

    #[test]
    fn soc_step_basics() {
        let unit = battery(13.5);
        let mut state = battery_state(0.9);

        state.p_kw = 0.0;
        assert_eq!(step_battery_soc(&unit, &state, 60.0).unwrap(), 0.9);

        // Full-rate discharge for an hour from 90%: clamps at empty.
        state.p_kw = 13.5;
        assert_eq!(step_battery_soc(&unit, &state, 3600.0).unwrap(), 0.0);

        let pv_unit = pv(5.0);
        assert!(step_battery_soc(&pv_unit, &state, 60.0).is_err());
    }

    #[test]
    fn soc_deltas_sum_without_clamping() {
        let unit = battery(40.0);
        let mut state = battery_state(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dt = 2.0;
        let mut expected_total = 0.0;
        for _ in 0..2000 {
            state.p_kw = rng.gen_range(-5.0..5.0);
            expected_total -= state.p_kw * dt / (3600.0 * unit.e_capacity_kwh);
            state.soc = step_battery_soc(&unit, &state, dt).unwrap();
        }
        assert_abs_diff_eq!(state.soc - 0.5, expected_total, epsilon = 1e-12);
    }

    #[test]
    fn fleet_construction() {
        let feeder = build_synthetic_feeder(96, 1, 0.05).unwrap();

        let fleet = build_fleet(&feeder, 24, 0.0, 1, CostBases::default()).unwrap();
        assert_eq!(fleet.len(), 24);
        assert!(fleet.iter().all(|u| u.kind == DerKind::Pv));

        let fleet = build_fleet(&feeder, 24, 0.5, 1, CostBases::default()).unwrap();
        assert_eq!(fleet.iter().filter(|u| u.kind == DerKind::Battery).count(), 12);
        for u in &fleet {
            match u.kind {
                DerKind::Pv => {
                    assert!(u.s_rating_kw >= PV_CAPACITY_KW.0 && u.s_rating_kw <= PV_CAPACITY_KW.1);
                }
                DerKind::Battery => {
                    assert!(
                        u.e_capacity_kwh >= BATTERY_CAPACITY_KWH.0
                            && u.e_capacity_kwh <= BATTERY_CAPACITY_KWH.1
                    );
                }
            }
        }

        // PV slots are distinct.
        let mut slots: Vec<(usize, usize)> = fleet
            .iter()
            .filter(|u| u.kind == DerKind::Pv)
            .map(|u| (u.node, u.phase.index()))
            .collect();
        slots.sort();
        slots.dedup();
        assert_eq!(slots.len(), 24);

        let again = build_fleet(&feeder, 24, 0.5, 1, CostBases::default()).unwrap();
        assert_eq!(fleet, again);

        assert!(build_fleet(&feeder, 96 * 3 + 1, 0.5, 1, CostBases::default()).is_err());
    }

    #[test]
    fn fleet_json_round_trip() {
        let feeder = build_synthetic_feeder(48, 3, 0.05).unwrap();
        let fleet = build_fleet(&feeder, 12, 0.5, 9, CostBases::default()).unwrap();
        let json = serde_json::to_string(&fleet_to_specs(&fleet)).unwrap();
        let specs: Vec<DerUnitSpec> = serde_json::from_str(&json).unwrap();
        let back = fleet_from_specs(&specs, 48).unwrap();
        assert_eq!(fleet, back);
    }
}
