//! Synthetic piecewise-linear demand and PV availability profiles. The
//! shapes are deliberately smooth so the step disturbance dominates the
//! exogenous drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::feeder::{FeederModel, NodalPq, PHASE_COUNT};

/// Demand sample spacing (15-minute metering cadence).
pub const LOAD_SAMPLE_PERIOD_S: f64 = 900.0;
/// PV availability sample spacing (1-minute cadence).
pub const PV_SAMPLE_PERIOD_S: f64 = 60.0;
/// Demand drift band around nominal over the horizon.
const LOAD_DRIFT: f64 = 0.02;
/// PV availability band (fraction of rating).
const PV_AVAIL_LO: f64 = 0.68;
const PV_AVAIL_HI: f64 = 0.78;

/// Per-phase per-node demand time series over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub sample_period_s: f64,
    /// One scaling factor per phase per sample; nodal demand is the
    /// feeder's nominal load times the factor.
    samples: Vec<[f64; PHASE_COUNT]>,
    nominal: NodalPq,
}

impl LoadProfile {
    /// Smooth per-phase drift around the feeder's nominal demand, equal to
    /// nominal at t = 0. Deterministic per seed.
    pub fn synthetic(feeder: &FeederModel, horizon_s: f64, seed: u64) -> Result<LoadProfile> {
        if !(horizon_s > 0.0) {
            return Err(CoreError::invalid("horizon must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x10ad);
        let count = (horizon_s / LOAD_SAMPLE_PERIOD_S).ceil() as usize + 1;
        let mut samples = Vec::with_capacity(count);
        let mut current = [1.0_f64; PHASE_COUNT];
        let mut target: [f64; PHASE_COUNT] =
            std::array::from_fn(|_| 1.0 + rng.gen_range(-LOAD_DRIFT..=LOAD_DRIFT));
        for k in 0..count {
            samples.push(current);
            // Retarget every half hour for a piecewise-linear wander.
            if k % 2 == 1 {
                target = std::array::from_fn(|_| 1.0 + rng.gen_range(-LOAD_DRIFT..=LOAD_DRIFT));
            }
            for phase in 0..PHASE_COUNT {
                current[phase] += (target[phase] - current[phase]) * 0.5;
            }
        }
        Ok(LoadProfile {
            sample_period_s: LOAD_SAMPLE_PERIOD_S,
            samples,
            nominal: feeder.nominal_load.clone(),
        })
    }

    /// Constant nominal demand over the horizon.
    pub fn flat(feeder: &FeederModel, horizon_s: f64) -> Result<LoadProfile> {
        if !(horizon_s > 0.0) {
            return Err(CoreError::invalid("horizon must be positive"));
        }
        let count = (horizon_s / LOAD_SAMPLE_PERIOD_S).ceil() as usize + 1;
        Ok(LoadProfile {
            sample_period_s: LOAD_SAMPLE_PERIOD_S,
            samples: vec![[1.0; PHASE_COUNT]; count],
            nominal: feeder.nominal_load.clone(),
        })
    }

    pub fn covers(&self, horizon_s: f64) -> bool {
        (self.samples.len() - 1) as f64 * self.sample_period_s >= horizon_s - 1e-9
    }

    fn factors_at(&self, t_s: f64) -> [f64; PHASE_COUNT] {
        interp_rows(&self.samples, self.sample_period_s, t_s)
    }

    /// Nodal demand at time `t_s` (linear interpolation between samples).
    pub fn demand_at(&self, t_s: f64) -> NodalPq {
        let factors = self.factors_at(t_s);
        NodalPq {
            p_mw: std::array::from_fn(|phase| &self.nominal.p_mw[phase] * factors[phase]),
            q_mvar: std::array::from_fn(|phase| &self.nominal.q_mvar[phase] * factors[phase]),
        }
    }

    pub fn total_phase_demand_at(&self, t_s: f64) -> [f64; PHASE_COUNT] {
        let factors = self.factors_at(t_s);
        std::array::from_fn(|phase| self.nominal.p_mw[phase].sum() * factors[phase])
    }
}

/// Fleet-wide PV availability as a fraction of rating.
#[derive(Debug, Clone, PartialEq)]
pub struct PvProfile {
    pub sample_period_s: f64,
    samples: Vec<f64>,
}

impl PvProfile {
    /// Smooth midday availability plateau. Deterministic per seed.
    pub fn synthetic(horizon_s: f64, seed: u64) -> Result<PvProfile> {
        if !(horizon_s > 0.0) {
            return Err(CoreError::invalid("horizon must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x50_1a);
        let count = (horizon_s / PV_SAMPLE_PERIOD_S).ceil() as usize + 1;
        // Breakpoints every 30 minutes, linearly interpolated to 1-minute
        // samples.
        let bp_every = (1800.0 / PV_SAMPLE_PERIOD_S) as usize;
        let bp_count = count / bp_every + 2;
        let breakpoints: Vec<f64> =
            (0..bp_count).map(|_| rng.gen_range(PV_AVAIL_LO..=PV_AVAIL_HI)).collect();
        let samples = (0..count)
            .map(|k| {
                let pos = k as f64 / bp_every as f64;
                let i = (pos.floor() as usize).min(bp_count - 2);
                let frac = pos - i as f64;
                breakpoints[i] * (1.0 - frac) + breakpoints[i + 1] * frac
            })
            .collect();
        Ok(PvProfile { sample_period_s: PV_SAMPLE_PERIOD_S, samples })
    }

    /// Constant availability.
    pub fn flat(horizon_s: f64, availability: f64) -> Result<PvProfile> {
        if !(0.0..=1.0).contains(&availability) {
            return Err(CoreError::invalid("availability must be in [0, 1]"));
        }
        let count = (horizon_s / PV_SAMPLE_PERIOD_S).ceil() as usize + 1;
        Ok(PvProfile { sample_period_s: PV_SAMPLE_PERIOD_S, samples: vec![availability; count] })
    }

    pub fn availability_at(&self, t_s: f64) -> f64 {
        interp_scalar(&self.samples, self.sample_period_s, t_s)
    }
}

fn interp_scalar(samples: &[f64], period: f64, t_s: f64) -> f64 {
    let pos = (t_s / period).max(0.0);
    let i = (pos.floor() as usize).min(samples.len() - 1);
    if i + 1 >= samples.len() {
        return samples[samples.len() - 1];
    }
    let frac = pos - i as f64;
    samples[i] * (1.0 - frac) + samples[i + 1] * frac
}

fn interp_rows(samples: &[[f64; PHASE_COUNT]], period: f64, t_s: f64) -> [f64; PHASE_COUNT] {
    let pos = (t_s / period).max(0.0);
    let i = (pos.floor() as usize).min(samples.len() - 1);
    if i + 1 >= samples.len() {
        return samples[samples.len() - 1];
    }
    let frac = pos - i as f64;
    std::array::from_fn(|p| samples[i][p] * (1.0 - frac) + samples[i + 1][p] * frac)
}

/// Total nominal demand per phase (MW).
pub fn nominal_total_demand(feeder: &FeederModel) -> [f64; PHASE_COUNT] {
    std::array::from_fn(|phase| feeder.nominal_load.p_mw[phase].sum())
}
