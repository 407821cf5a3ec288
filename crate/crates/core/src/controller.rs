//! The hierarchical primal-dual control law: projected dual ascent at the
//! coordinator and projected primal gradient steps at the local
//! controllers, coupled only through measurements and direction signals.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::feeder::{FeederModel, Phase, PHASE_COUNT};
use crate::fleet::{cost_gradient, project_setpoint, DerState, DerUnit};

/// Bounds the grid services are contracted against: a voltage band and a
/// per-phase feeder-head power band around the current VPP setpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridServiceBounds {
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    pub vpp_setpoint_mw: [f64; PHASE_COUNT],
    pub vpp_halfwidth_mw: f64,
}

impl GridServiceBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min_pu < self.v_max_pu) {
            return Err(CoreError::invalid("v_min must be below v_max"));
        }
        if !(self.vpp_halfwidth_mw > 0.0) {
            return Err(CoreError::invalid("vpp_halfwidth must be positive"));
        }
        Ok(())
    }
}

/// Location of one monitored voltage node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorLocation {
    pub phase: Phase,
    pub node: usize,
}

/// Nonnegative multipliers held by the coordinator: one upper/lower pair
/// per monitored voltage node and one per phase for the VPP band.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub mu_upper: Vec<f64>,
    pub mu_lower: Vec<f64>,
    pub lambda_upper: [f64; PHASE_COUNT],
    pub lambda_lower: [f64; PHASE_COUNT],
    pub alpha: f64,
}

impl DualState {
    pub fn new(sensor_count: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(CoreError::invalid("dual step size alpha must be positive"));
        }
        Ok(DualState {
            mu_upper: vec![0.0; sensor_count],
            mu_lower: vec![0.0; sensor_count],
            lambda_upper: [0.0; PHASE_COUNT],
            lambda_lower: [0.0; PHASE_COUNT],
            alpha,
        })
    }

    pub fn mu_norm(&self) -> f64 {
        self.mu_upper
            .iter()
            .chain(self.mu_lower.iter())
            .map(|m| m * m)
            .sum::<f64>()
            .sqrt()
    }

    pub fn lambda_norm(&self) -> f64 {
        self.lambda_upper
            .iter()
            .chain(self.lambda_lower.iter())
            .map(|l| l * l)
            .sum::<f64>()
            .sqrt()
    }

    pub fn assert_nonnegative(&self) {
        debug_assert!(
            self.mu_upper
                .iter()
                .chain(self.mu_lower.iter())
                .chain(self.lambda_upper.iter())
                .chain(self.lambda_lower.iter())
                .all(|m| *m >= 0.0 && m.is_finite()),
            "dual state left the nonnegative orthant"
        );
    }
}

/// Per-DER gradient message from the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionSignal {
    pub der_id: u32,
    pub d_p: f64,
    pub d_q: f64,
    pub issued_at_s: f64,
}

/// One projected dual-ascent step against the latest received
/// measurements. Absent entries (never received) contribute no violation
/// and leave their multipliers untouched; stale entries are used as-is.
pub fn coordinator_dual_update(
    duals: &mut DualState,
    bounds: &GridServiceBounds,
    voltages: &[Option<f64>],
    feeder_head_mw: &[Option<f64>; PHASE_COUNT],
) {
    let alpha = duals.alpha;
    for (i, v) in voltages.iter().enumerate() {
        if let Some(v) = v {
            duals.mu_upper[i] = (duals.mu_upper[i] + alpha * (v - bounds.v_max_pu)).max(0.0);
            duals.mu_lower[i] = (duals.mu_lower[i] + alpha * (bounds.v_min_pu - v)).max(0.0);
        }
    }
    for phase in 0..PHASE_COUNT {
        if let Some(p0) = feeder_head_mw[phase] {
            let upper = bounds.vpp_setpoint_mw[phase] + bounds.vpp_halfwidth_mw;
            let lower = bounds.vpp_setpoint_mw[phase] - bounds.vpp_halfwidth_mw;
            duals.lambda_upper[phase] = (duals.lambda_upper[phase] + alpha * (p0 - upper)).max(0.0);
            duals.lambda_lower[phase] = (duals.lambda_lower[phase] + alpha * (lower - p0)).max(0.0);
        }
    }
    duals.assert_nonnegative();
}

/// Form the per-DER direction signals from the dual state: voltage
/// multipliers weighted by the network sensitivities at the DER's node,
/// minus the net VPP pressure on its phase (injection reduces import).
pub fn compute_direction_signals(
    duals: &DualState,
    feeder: &FeederModel,
    sensors: &[SensorLocation],
    fleet: &[DerUnit],
    now_s: f64,
) -> Vec<DirectionSignal> {
    fleet
        .iter()
        .map(|unit| {
            let phase = unit.phase.index();
            let r = &feeder.r_sens[phase];
            let x = &feeder.x_sens[phase];
            let mut d_p = 0.0;
            let mut d_q = 0.0;
            for (m, loc) in sensors.iter().enumerate() {
                if loc.phase != unit.phase {
                    continue;
                }
                let net_mu = duals.mu_upper[m] - duals.mu_lower[m];
                d_p += r[[loc.node, unit.node]] * net_mu / feeder.s_base_mw;
                d_q += x[[loc.node, unit.node]] * net_mu / feeder.s_base_mw;
            }
            d_p -= duals.lambda_upper[phase] - duals.lambda_lower[phase];
            DirectionSignal { der_id: unit.id, d_p, d_q, issued_at_s: now_s }
        })
        .collect()
}

/// Effective primal step for one unit: the configured step size normalized
/// by the unit's dominant cost curvature, so the cost-descent contraction
/// rate is uniform across capacities.
pub fn beta_eff(unit: &DerUnit, beta: f64) -> f64 {
    beta / (2.0 * unit.cost_cp.max(unit.cost_cq).max(1e-9))
}

/// One local primal update: a projected gradient step taken from the most
/// recently communicated injection measurement. A controller that has
/// never received a direction signal steps against the local cost alone.
pub fn local_primal_update(
    unit: &DerUnit,
    state: &DerState,
    signal: Option<&DirectionSignal>,
    measured: (f64, f64),
    beta: f64,
    dt_s: f64,
) -> (f64, f64) {
    let (d_p, d_q) = signal.map_or((0.0, 0.0), |s| (s.d_p, s.d_q));
    let (g_p, g_q) = cost_gradient(unit, state, measured, dt_s);
    let step = beta_eff(unit, beta);
    let candidate = (measured.0 - step * (g_p + d_p), measured.1 - step * (g_q + d_q));
    project_setpoint(unit, state, candidate, dt_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::build_synthetic_feeder;
    use crate::fleet::{build_fleet, CostBases, DerKind};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> GridServiceBounds {
        GridServiceBounds {
            v_min_pu: 0.95,
            v_max_pu: 1.03,
            vpp_setpoint_mw: [0.97, 0.93, 0.95],
            vpp_halfwidth_mw: 0.01,
        }
    }

    #[test]
    fn duals_stay_zero_inside_bounds() {
        let mut duals = DualState::new(2, 1.0).unwrap();
        coordinator_dual_update(
            &mut duals,
            &bounds(),
            &[Some(1.00), Some(0.99)],
            &[Some(0.97), Some(0.93), Some(0.95)],
        );
        assert!(duals.mu_norm() == 0.0 && duals.lambda_norm() == 0.0);
    }

    #[test]
    fn upper_voltage_violation_steps_mu() {
        let mut duals = DualState::new(1, 1.0).unwrap();
        duals.mu_upper[0] = 0.1;
        coordinator_dual_update(&mut duals, &bounds(), &[Some(1.04)], &[None, None, None]);
        assert_abs_diff_eq!(duals.mu_upper[0], 0.11, epsilon = 1e-12);
        assert_eq!(duals.mu_lower[0], 0.0);
    }

    #[test]
    fn vpp_violation_uses_band_edge() {
        // Import of 1.20 MW against a 0.97 MW setpoint with 0.01 MW
        // halfwidth violates the upper edge (0.98) by 0.22 MW.
        let mut duals = DualState::new(0, 1.0).unwrap();
        coordinator_dual_update(&mut duals, &bounds(), &[], &[Some(1.20), None, None]);
        assert_abs_diff_eq!(duals.lambda_upper[0], 0.22, epsilon = 1e-12);
        assert_eq!(duals.lambda_lower[0], 0.0);
    }

    #[test]
    fn never_received_sources_leave_duals_unchanged() {
        let mut duals = DualState::new(1, 1.0).unwrap();
        duals.mu_upper[0] = 0.3;
        duals.lambda_lower[1] = 0.2;
        coordinator_dual_update(&mut duals, &bounds(), &[None], &[None, None, None]);
        assert_eq!(duals.mu_upper[0], 0.3);
        assert_eq!(duals.lambda_lower[1], 0.2);
    }

    #[test]
    fn zero_duals_give_zero_signals() {
        let feeder = build_synthetic_feeder(20, 2, 0.05).unwrap();
        let fleet = build_fleet(&feeder, 9, 0.5, 2, CostBases::default()).unwrap();
        let sensors: Vec<SensorLocation> = fleet
            .iter()
            .filter(|u| u.kind == DerKind::Pv)
            .map(|u| SensorLocation { phase: u.phase, node: u.node })
            .collect();
        let duals = DualState::new(sensors.len(), 1.0).unwrap();
        let signals = compute_direction_signals(&duals, &feeder, &sensors, &fleet, 0.0);
        assert!(signals.iter().all(|s| s.d_p == 0.0 && s.d_q == 0.0));
    }

    #[test]
    fn lambda_lower_pushes_phase_down_only() {
        let feeder = build_synthetic_feeder(20, 2, 0.05).unwrap();
        let fleet = build_fleet(&feeder, 9, 0.0, 2, CostBases::default()).unwrap();
        let sensors = vec![];
        let mut duals = DualState::new(0, 1.0).unwrap();
        duals.lambda_lower[Phase::A.index()] = 0.5;
        let signals = compute_direction_signals(&duals, &feeder, &sensors, &fleet, 0.0);
        for (unit, sig) in fleet.iter().zip(&signals) {
            if unit.phase == Phase::A {
                assert_eq!(sig.d_p, 0.5);
            } else {
                assert_eq!(sig.d_p, 0.0);
            }
            assert_eq!(sig.d_q, 0.0);
        }
    }

    #[test]
    fn signals_match_independent_matrix_vector_product() {
        let feeder = build_synthetic_feeder(24, 6, 0.05).unwrap();
        let fleet = build_fleet(&feeder, 12, 0.5, 6, CostBases::default()).unwrap();
        let sensors: Vec<SensorLocation> = fleet
            .iter()
            .filter(|u| u.kind == DerKind::Pv)
            .map(|u| SensorLocation { phase: u.phase, node: u.node })
            .collect();
        let mut duals = DualState::new(sensors.len(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in 0..sensors.len() {
            duals.mu_upper[m] = rng.gen_range(0.0..0.2);
            duals.mu_lower[m] = rng.gen_range(0.0..0.2);
        }
        for phase in 0..PHASE_COUNT {
            duals.lambda_upper[phase] = rng.gen_range(0.0..0.5);
            duals.lambda_lower[phase] = rng.gen_range(0.0..0.5);
        }

        let signals = compute_direction_signals(&duals, &feeder, &sensors, &fleet, 12.0);

        // Oracle: nalgebra matrix-vector product over the sensor rows.
        for (unit, sig) in fleet.iter().zip(&signals) {
            let rows: Vec<usize> = sensors
                .iter()
                .enumerate()
                .filter(|(_, loc)| loc.phase == unit.phase)
                .map(|(m, _)| m)
                .collect();
            let r = nalgebra::DMatrix::from_fn(rows.len(), 1, |k, _| {
                feeder.r_sens[unit.phase.index()][[sensors[rows[k]].node, unit.node]]
            });
            let x = nalgebra::DMatrix::from_fn(rows.len(), 1, |k, _| {
                feeder.x_sens[unit.phase.index()][[sensors[rows[k]].node, unit.node]]
            });
            let mu = nalgebra::DMatrix::from_fn(rows.len(), 1, |k, _| {
                duals.mu_upper[rows[k]] - duals.mu_lower[rows[k]]
            });
            let d_p = r.dot(&mu) / feeder.s_base_mw
                - (duals.lambda_upper[unit.phase.index()] - duals.lambda_lower[unit.phase.index()]);
            let d_q = x.dot(&mu) / feeder.s_base_mw;
            assert_abs_diff_eq!(sig.d_p, d_p, epsilon = 1e-12);
            assert_abs_diff_eq!(sig.d_q, d_q, epsilon = 1e-12);
        }
    }

    fn test_pv() -> DerUnit {
        DerUnit {
            id: 0,
            node: 1,
            phase: Phase::A,
            kind: DerKind::Pv,
            s_rating_kw: 10.0,
            p_rating_kw: 10.0,
            e_capacity_kwh: 0.0,
            soc_pref: 0.0,
            cost_cp: 0.05,
            cost_cq: 0.05,
            cost_cs: 0.0,
        }
    }

    #[test]
    fn pv_at_available_power_is_a_fixed_point() {
        let unit = test_pv();
        let state = DerState { p_avail_kw: 8.0, ..DerState::new(&unit) };
        let next = local_primal_update(&unit, &state, None, (8.0, 0.0), 0.1, 10.0);
        assert_eq!(next, (8.0, 0.0));
    }

    #[test]
    fn pv_below_available_power_moves_up() {
        let unit = test_pv();
        let state = DerState { p_avail_kw: 8.0, ..DerState::new(&unit) };
        let mut p = 2.0;
        for _ in 0..200 {
            let next = local_primal_update(&unit, &state, None, (p, 0.0), 0.1, 10.0);
            assert!(next.0 > p || (next.0 - 8.0).abs() < 1e-12);
            p = next.0;
        }
        assert_abs_diff_eq!(p, 8.0, epsilon = 1e-6);
    }

    #[test]
    fn one_step_matches_hand_computed_instance() {
        // cost_cp = cost_cq = 0.05, beta_eff = 0.1 / (2 * 0.05) = 1.0.
        // measured (4, 1), gradient (2*0.05*(4-8), 2*0.05*1) = (-0.4, 0.1),
        // signal (0.2, -0.05): candidate (4 - (-0.2), 1 - 0.05) = (4.2, 0.95),
        // inside the feasible set, so the projection is the identity.
        let unit = test_pv();
        let state = DerState { p_avail_kw: 8.0, ..DerState::new(&unit) };
        let signal = DirectionSignal { der_id: 0, d_p: 0.2, d_q: -0.05, issued_at_s: 0.0 };
        let next = local_primal_update(&unit, &state, Some(&signal), (4.0, 1.0), 0.1, 10.0);
        assert_abs_diff_eq!(next.0, 4.2, epsilon = 1e-12);
        assert_abs_diff_eq!(next.1, 0.95, epsilon = 1e-12);
    }

    #[test]
    fn multipliers_never_negative_under_random_updates() {
        let mut duals = DualState::new(4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let voltages: Vec<Option<f64>> = (0..4)
                .map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0.90..1.08)))
                .collect();
            let p0 = std::array::from_fn(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0.5..1.5)));
            coordinator_dual_update(&mut duals, &bounds(), &voltages, &p0);
            for m in duals.mu_upper.iter().chain(duals.mu_lower.iter()) {
                assert!(*m >= 0.0);
            }
            for l in duals.lambda_upper.iter().chain(duals.lambda_lower.iter()) {
                assert!(*l >= 0.0);
            }
        }
    }
}
