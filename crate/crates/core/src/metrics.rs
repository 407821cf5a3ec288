//! Functionality metric and severity-limit search: decide whether a run
//! recovered from the disturbance, estimate the functional fraction over
//! seeded trials, and bisect fault severity for the largest value that
//! keeps the system functional.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comm::{ChannelCategory, ChannelKind};
use crate::engine::{
    derive_seed, run_scenario, FaultConfig, FaultKindTag, Scenario, SimOutput, Subcategory,
};
use crate::error::{CoreError, Result};
use crate::feeder::PHASE_COUNT;

/// Reference delay limits (seconds) measured on the full-scale system,
/// reported alongside desk-scale results for context. The final entry is
/// an upper bound rather than a measured limit.
pub const REF_DELAY_LIMITS_S: [(ChannelKind, f64); 5] = [
    (ChannelKind::FeederHeadMeasurement, 80.0),
    (ChannelKind::VoltageMeasurement, 60.0),
    (ChannelKind::DirectionSignal, 50.0),
    (ChannelKind::SetpointToDer, 18.0),
    (ChannelKind::PqMeasurementToController, 0.2),
];

/// Pass/fail criterion: after the disturbance, every grid-service
/// measurement must sit inside its tolerance-widened bounds through the
/// final settle window of the evaluation period.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FunctionalityMetric {
    pub duration_s: f64,
    pub settle_window_s: f64,
    pub voltage_tol_pu: f64,
    pub vpp_tol_mw: f64,
}

impl Default for FunctionalityMetric {
    fn default() -> Self {
        FunctionalityMetric {
            duration_s: 2400.0,
            settle_window_s: 60.0,
            voltage_tol_pu: 0.002,
            vpp_tol_mw: 0.02,
        }
    }
}

impl FunctionalityMetric {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > self.settle_window_s && self.settle_window_s > 0.0) {
            return Err(CoreError::invalid("metric requires duration > settle window > 0"));
        }
        if self.voltage_tol_pu < 0.0 || self.vpp_tol_mw < 0.0 {
            return Err(CoreError::invalid("metric tolerances must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalityVerdict {
    pub functional: bool,
    /// Start of the earliest settle-window-long stretch (after the
    /// disturbance) with every sample inside the widened bounds.
    pub first_satisfied_s: Option<f64>,
}

fn record_in_bounds(
    r: &crate::engine::TraceRecord,
    out: &SimOutput,
    metric: &FunctionalityMetric,
) -> bool {
    let v_lo = out.v_min_pu - metric.voltage_tol_pu;
    let v_hi = out.v_max_pu + metric.voltage_tol_pu;
    let band = out.vpp_halfwidth_mw + metric.vpp_tol_mw;
    for &v in &r.monitored_v_pu {
        if !(v_lo..=v_hi).contains(&v) {
            return false;
        }
    }
    for phase in 0..PHASE_COUNT {
        if (r.p0_mw[phase] - r.vpp_setpoint_mw[phase]).abs() > band {
            return false;
        }
    }
    true
}

/// Evaluate the functionality metric on a finished run. Comparisons
/// against the widened bounds are inclusive.
pub fn is_functional(out: &SimOutput, metric: &FunctionalityMetric) -> Result<FunctionalityVerdict> {
    metric.validate()?;
    let t_d = out.disturbance_time_s;
    let t_end = t_d + metric.duration_s;
    let covered = out.records.last().map_or(0.0, |r| r.t_s);
    if covered + 1e-9 < t_end {
        return Err(CoreError::invalid(format!(
            "trace ends at {covered} s but the metric needs coverage through {t_end} s"
        )));
    }

    let window_start = t_end - metric.settle_window_s;
    let mut functional = true;
    for r in &out.records {
        if r.t_s >= window_start - 1e-9 && r.t_s <= t_end + 1e-9 && !record_in_bounds(r, out, metric) {
            functional = false;
            break;
        }
    }

    // Earliest sustained in-bounds window after the disturbance.
    let post: Vec<&crate::engine::TraceRecord> =
        out.records.iter().filter(|r| r.t_s >= t_d - 1e-9 && r.t_s <= t_end + 1e-9).collect();
    let mut first_satisfied_s = None;
    let mut run_start: Option<f64> = None;
    for r in &post {
        if record_in_bounds(r, out, metric) {
            let start = *run_start.get_or_insert(r.t_s);
            if r.t_s - start >= metric.settle_window_s - 1e-9 {
                first_satisfied_s = Some(start);
                break;
            }
        } else {
            run_start = None;
        }
    }

    Ok(FunctionalityVerdict { functional, first_satisfied_s })
}

/// Which severity knob an experiment sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PacketLoss,
    LinkFailure,
    Delay,
}

impl ExperimentKind {
    fn tag(self) -> FaultKindTag {
        match self {
            ExperimentKind::PacketLoss => FaultKindTag::PacketLoss,
            ExperimentKind::LinkFailure => FaultKindTag::LinkFailure,
            ExperimentKind::Delay => FaultKindTag::Delay,
        }
    }

    /// Delay faults draw nothing from the channel RNG, so every trial of a
    /// given severity is identical.
    pub fn is_deterministic(self) -> bool {
        matches!(self, ExperimentKind::Delay)
    }
}

/// Channels an experiment is applied to: one concrete kind or a whole
/// category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Kind(ChannelKind),
    Category(ChannelCategory),
}

impl FaultTarget {
    pub fn label(&self) -> &'static str {
        match self {
            FaultTarget::Kind(k) => k.label(),
            FaultTarget::Category(ChannelCategory::GridServiceMeasurement) => "grid_service_measurement",
            FaultTarget::Category(ChannelCategory::DirectionSignal) => "direction_signal",
            FaultTarget::Category(ChannelCategory::DerLink) => "der_link",
        }
    }

    fn to_config_fields(self) -> (ChannelCategory, Option<Subcategory>) {
        match self {
            FaultTarget::Category(c) => (c, None),
            FaultTarget::Kind(ChannelKind::VoltageMeasurement) => {
                (ChannelCategory::GridServiceMeasurement, Some(Subcategory::Voltage))
            }
            FaultTarget::Kind(ChannelKind::FeederHeadMeasurement) => {
                (ChannelCategory::GridServiceMeasurement, Some(Subcategory::FeederHead))
            }
            FaultTarget::Kind(ChannelKind::DirectionSignal) => (ChannelCategory::DirectionSignal, None),
            FaultTarget::Kind(ChannelKind::SetpointToDer) => {
                (ChannelCategory::DerLink, Some(Subcategory::Setpoint))
            }
            FaultTarget::Kind(ChannelKind::PqMeasurementToController) => {
                (ChannelCategory::DerLink, Some(Subcategory::PqMeasurement))
            }
        }
    }
}

/// A fault experiment template: everything but the severity value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FaultExperiment {
    pub kind: ExperimentKind,
    pub target: FaultTarget,
    /// Fraction of the target's channels carrying the fault (packet loss
    /// sweeps this; the other experiments cover every channel).
    pub channel_fraction: f64,
    /// Link downtime (seconds); link-failure experiments only.
    pub downtime_s: f64,
}

impl FaultExperiment {
    pub fn fault_config(&self, severity: f64, seed: u64) -> FaultConfig {
        let (category, subcategory) = self.target.to_config_fields();
        let mut config = FaultConfig {
            category,
            subcategory,
            model: self.kind.tag(),
            p_drop: None,
            p_fail: None,
            downtime_s: None,
            latency_s: None,
            channel_fraction: Some(self.channel_fraction),
            seed: Some(seed),
        };
        match self.kind {
            ExperimentKind::PacketLoss => config.p_drop = Some(severity),
            ExperimentKind::LinkFailure => {
                config.p_fail = Some(severity);
                config.downtime_s = Some(self.downtime_s);
            }
            ExperimentKind::Delay => config.latency_s = Some(severity),
        }
        config
    }

    /// The secondary sweep parameter recorded next to a limit, if any.
    pub fn secondary_param(&self) -> Option<f64> {
        match self.kind {
            ExperimentKind::PacketLoss => Some(self.channel_fraction),
            ExperimentKind::LinkFailure => Some(self.downtime_s),
            ExperimentKind::Delay => None,
        }
    }
}

/// Scenario for one trial: the base plus the experiment's fault at the
/// given severity, seeded for this trial.
pub fn scenario_with_fault(
    base: &Scenario,
    experiment: &FaultExperiment,
    severity: f64,
    trial_seed: u64,
) -> Scenario {
    let mut scenario = base.clone();
    scenario.faults.push(experiment.fault_config(severity, trial_seed));
    scenario
}

/// Fraction of `trials` seeded runs judged functional at this severity.
/// Trials differ only in their fault RNG streams.
pub fn functional_fraction(
    base: &Scenario,
    experiment: &FaultExperiment,
    severity: f64,
    metric: &FunctionalityMetric,
    trials: usize,
    seed_family: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(CoreError::invalid("trials must be >= 1"));
    }
    // A deterministic fault makes all trials identical; one run decides.
    let effective = if experiment.kind.is_deterministic() { 1 } else { trials };
    let verdicts: Vec<Result<bool>> = (0..effective)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = derive_seed(seed_family, 0x7_000 + trial as u64);
            let scenario = scenario_with_fault(base, experiment, severity, trial_seed);
            let out = run_scenario(&scenario)?;
            Ok(is_functional(&out, metric)?.functional)
        })
        .collect();
    let mut functional = 0usize;
    for v in verdicts {
        if v? {
            functional += 1;
        }
    }
    Ok(functional as f64 / effective as f64)
}

/// Search configuration for one severity-limit bisection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lo: f64,
    pub hi: f64,
    pub resolution: f64,
    pub trials: usize,
    pub theta: f64,
    pub master_seed: u64,
}

/// Flags qualifying a reported limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitStatus {
    /// Bracket verified: functional at `bracket_lo`, nonfunctional at
    /// `bracket_hi`, both re-checked with fresh seeds.
    Bracketed,
    /// Still functional at the top of the search range.
    UnboundedInRange,
    /// Re-verification with fresh seeds disagreed with the bisection;
    /// the bracket is reported but should be treated as noisy.
    BracketUnstable,
}

/// Outcome of one severity-limit search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitResult {
    pub category: String,
    pub fault_kind: ExperimentKind,
    pub secondary_param: Option<f64>,
    pub limit: f64,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
    pub trials: usize,
    pub theta: f64,
    pub seed: u64,
    pub status: LimitStatus,
}

/// Bisect a monotone step predicate on `[lo, hi]` down to `resolution`,
/// assuming `pred(lo)` and `!pred(hi)`. Returns the final bracket.
pub fn bisect_threshold(
    lo: f64,
    hi: f64,
    resolution: f64,
    mut pred: impl FnMut(f64) -> Result<bool>,
) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        if pred(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, hi))
}

/// Find the largest severity that keeps the scenario functional.
///
/// The acceptance rule is `functional_fraction >= theta`. The floor of the
/// range must be functional (otherwise `BaselineBroken`); if the ceiling
/// is still functional the limit is reported as unbounded in range. Both
/// bracket ends are re-verified with fresh seed families.
pub fn find_limit(
    base: &Scenario,
    experiment: &FaultExperiment,
    metric: &FunctionalityMetric,
    search: &SearchConfig,
) -> Result<LimitResult> {
    if !(search.lo < search.hi) || !(search.resolution > 0.0) {
        return Err(CoreError::invalid("search range must satisfy lo < hi with resolution > 0"));
    }
    if !(0.0..=1.0).contains(&search.theta) {
        return Err(CoreError::invalid("theta must be in [0, 1]"));
    }

    let fam = |salt: u64| derive_seed(search.master_seed, salt);
    let accept = |severity: f64, family: u64| -> Result<bool> {
        Ok(functional_fraction(base, experiment, severity, metric, search.trials, family)? >= search.theta)
    };

    if !accept(search.lo, fam(1))? {
        return Err(CoreError::BaselineBroken { severity: search.lo });
    }
    let result_base = |limit, lo, hi, status| LimitResult {
        category: experiment.target.label().to_string(),
        fault_kind: experiment.kind,
        secondary_param: experiment.secondary_param(),
        limit,
        bracket_lo: lo,
        bracket_hi: hi,
        trials: search.trials,
        theta: search.theta,
        seed: search.master_seed,
        status,
    };
    if accept(search.hi, fam(2))? {
        return Ok(result_base(search.hi, search.hi, search.hi, LimitStatus::UnboundedInRange));
    }

    let (lo, hi) = bisect_threshold(search.lo, search.hi, search.resolution, |s| accept(s, fam(3)))?;

    // Re-verify both ends with fresh seeds.
    let lo_ok = accept(lo, fam(4))?;
    let hi_ok = accept(hi, fam(5))?;
    let status = if lo_ok && !hi_ok { LimitStatus::Bracketed } else { LimitStatus::BracketUnstable };
    Ok(result_base(lo, lo, hi, status))
}

/// Campaign configuration: one experiment swept over a secondary grid for
/// each target, with a shared search range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub experiment: ExperimentKind,
    /// Targets to cover; defaults to the five channel kinds.
    #[serde(default)]
    pub targets: Option<Vec<FaultTarget>>,
    /// Secondary grid: channel fractions (packet loss) or downtimes in
    /// seconds (link failure). Ignored for delay campaigns.
    #[serde(default)]
    pub grid: Vec<f64>,
    pub search: SearchRange,
    pub trials: usize,
    pub theta: f64,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchRange {
    pub lo: f64,
    pub hi: f64,
    pub resolution: f64,
}

impl CampaignConfig {
    /// Default sweep grids mirroring the published experiment structure.
    pub fn default_for(experiment: ExperimentKind, master_seed: u64) -> CampaignConfig {
        let (grid, search) = match experiment {
            ExperimentKind::PacketLoss => (
                vec![0.25, 0.5, 0.75, 1.0],
                SearchRange { lo: 0.0, hi: 1.0, resolution: 0.02 },
            ),
            ExperimentKind::LinkFailure => (
                vec![60.0, 120.0, 300.0, 600.0, 1200.0],
                SearchRange { lo: 0.0, hi: 1.0, resolution: 0.02 },
            ),
            ExperimentKind::Delay => (vec![], SearchRange { lo: 0.0, hi: 600.0, resolution: 2.0 }),
        };
        CampaignConfig {
            experiment,
            targets: None,
            grid,
            search,
            trials: 10,
            theta: 1.0,
            master_seed,
        }
    }
}

/// One campaign row: either a limit or the reason this grid point failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignRow {
    pub category: String,
    pub fault_kind: ExperimentKind,
    pub secondary_param: Option<f64>,
    pub result: std::result::Result<LimitResult, String>,
}

/// Delay experiments run with faster communication cadences so the limit
/// resolution is not quantized by the coarse defaults.
pub fn delay_cadence_overrides(scenario: &mut Scenario) {
    scenario.measurement_period_s = 10.0;
    scenario.direction_period_s = Some(10.0);
    scenario.der_period_s = 2.0;
}

/// Run a full limit-finding campaign on the base scenario. Grid points are
/// independent; failures are recorded per point, not fatal.
pub fn run_campaign(base: &Scenario, config: &CampaignConfig, metric: &FunctionalityMetric) -> Vec<CampaignRow> {
    let mut scenario = base.clone();
    if config.experiment == ExperimentKind::Delay {
        delay_cadence_overrides(&mut scenario);
    }

    let targets: Vec<FaultTarget> = config
        .targets
        .clone()
        .unwrap_or_else(|| ChannelKind::ALL.iter().copied().map(FaultTarget::Kind).collect());
    let grid: Vec<Option<f64>> = if config.experiment == ExperimentKind::Delay || config.grid.is_empty() {
        vec![None]
    } else {
        config.grid.iter().copied().map(Some).collect()
    };

    let points: Vec<(FaultTarget, Option<f64>)> = targets
        .iter()
        .flat_map(|t| grid.iter().map(move |g| (*t, *g)))
        .collect();

    points
        .into_iter()
        .enumerate()
        .map(|(idx, (target, secondary))| {
            let experiment = FaultExperiment {
                kind: config.experiment,
                target,
                channel_fraction: match config.experiment {
                    ExperimentKind::PacketLoss => secondary.unwrap_or(1.0),
                    _ => 1.0,
                },
                downtime_s: match config.experiment {
                    ExperimentKind::LinkFailure => secondary.unwrap_or(300.0),
                    _ => 0.0,
                },
            };
            let search = SearchConfig {
                lo: config.search.lo,
                hi: config.search.hi,
                resolution: config.search.resolution,
                trials: config.trials,
                theta: config.theta,
                master_seed: derive_seed(config.master_seed, 0x9_000 + idx as u64),
            };
            let result = find_limit(&scenario, &experiment, metric, &search)
                .map_err(|e| e.to_string());
            CampaignRow {
                category: target.label().to_string(),
                fault_kind: config.experiment,
                secondary_param: experiment.secondary_param(),
                result,
            }
        })
        .collect()
}

fn fault_kind_label(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::PacketLoss => "packet_loss",
        ExperimentKind::LinkFailure => "link_failure",
        ExperimentKind::Delay => "delay",
    }
}

fn ref_delay_for(category: &str) -> Option<f64> {
    REF_DELAY_LIMITS_S
        .iter()
        .find(|(k, _)| k.label() == category)
        .map(|(_, v)| *v)
}

/// Render campaign rows as CSV; `comment` lines are prefixed with `#`.
/// Delay rows carry the full-scale reference limit for comparison.
pub fn campaign_csv(rows: &[CampaignRow], comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(
        "category,fault_kind,secondary_param,limit,bracket_lo,bracket_hi,trials,theta,seed,status,ref_delay_s\n",
    );
    for row in rows {
        let secondary = row.secondary_param.map_or(String::new(), |v| v.to_string());
        let reference = if row.fault_kind == ExperimentKind::Delay {
            ref_delay_for(&row.category).map_or(String::new(), |v| v.to_string())
        } else {
            String::new()
        };
        match &row.result {
            Ok(limit) => {
                let status = match limit.status {
                    LimitStatus::Bracketed => "bracketed",
                    LimitStatus::UnboundedInRange => "unbounded_in_range",
                    LimitStatus::BracketUnstable => "bracket_unstable",
                };
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    row.category,
                    fault_kind_label(row.fault_kind),
                    secondary,
                    limit.limit,
                    limit.bracket_lo,
                    limit.bracket_hi,
                    limit.trials,
                    limit.theta,
                    limit.seed,
                    status,
                    reference
                ));
            }
            Err(msg) => {
                out.push_str(&format!(
                    "{},{},{},,,,,,,error: {},{}\n",
                    row.category,
                    fault_kind_label(row.fault_kind),
                    secondary,
                    msg.replace(',', ";"),
                    reference
                ));
            }
        }
    }
    out
}
