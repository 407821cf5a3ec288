//! Linear per-phase feeder model: radial topology, LinDistFlow voltage
//! sensitivities, and the grid-service quantities (nodal voltages,
//! feeder-head powers) measured by the coordinator.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Number of phases; the model is electrically decoupled per phase.
pub const PHASE_COUNT: usize = 3;

/// Minimum edge impedance draw, as a fraction of `impedance_scale`.
const EDGE_IMPEDANCE_LO: f64 = 0.2;
/// Maximum edge impedance draw, as a fraction of `impedance_scale`.
const EDGE_IMPEDANCE_HI: f64 = 1.0;
/// Synthetic per-node per-phase real demand range (MW).
const NODE_LOAD_MW_LO: f64 = 0.0007;
const NODE_LOAD_MW_HI: f64 = 0.0018;
/// Reactive demand as a fraction of real demand (~0.95 power factor).
const NODE_LOAD_Q_FRACTION: f64 = 0.33;
/// Substation (root) voltage with zero load and zero injection.
const SUBSTATION_V_PU: f64 = 1.0;
/// Power base for per-unit conversion.
const S_BASE_MW: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; PHASE_COUNT] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Phase {
        Phase::ALL[i % PHASE_COUNT]
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::C => "C",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Per-phase, per-node real/reactive power vectors (MW / MVAr).
#[derive(Debug, Clone, PartialEq)]
pub struct NodalPq {
    pub p_mw: [Array1<f64>; PHASE_COUNT],
    pub q_mvar: [Array1<f64>; PHASE_COUNT],
}

impl NodalPq {
    pub fn zeros(node_count: usize) -> Self {
        NodalPq {
            p_mw: std::array::from_fn(|_| Array1::zeros(node_count)),
            q_mvar: std::array::from_fn(|_| Array1::zeros(node_count)),
        }
    }

    pub fn node_count(&self) -> usize {
        self.p_mw[0].len()
    }
}

/// One line segment of the radial feeder; node 0 is the substation root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeederEdge {
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
}

/// Linearized distribution feeder.
///
/// Voltages respond to injections through symmetric PSD sensitivity
/// matrices built from shared root-path impedances (LinDistFlow). The
/// nominal load is baked into `base_voltage`, so zero injection at
/// nominal load reproduces `base_voltage` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    pub node_count: usize,
    pub phases: [Phase; PHASE_COUNT],
    pub r_sens: [Array2<f64>; PHASE_COUNT],
    pub x_sens: [Array2<f64>; PHASE_COUNT],
    pub base_voltage: [Array1<f64>; PHASE_COUNT],
    pub nominal_load: NodalPq,
    pub s_base_mw: f64,
    /// Radial topology the sensitivities were built from, kept for
    /// file round-trips. All phases share the same conductors.
    pub edges: Vec<FeederEdge>,
}

/// Kind of grid-service measurement carried over category-1 channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeasurementKind {
    /// Voltage magnitude (p.u.) at a monitored node.
    VoltageMagnitude { node: usize },
    /// Feeder-head real power (MW) for one phase.
    FeederHeadPower,
}

/// A timestamped grid-service measurement sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeasurement {
    pub timestamp_s: f64,
    pub kind: MeasurementKind,
    pub phase: Phase,
    pub value: f64,
}

impl GridMeasurement {
    pub fn validate(&self) -> Result<()> {
        if self.timestamp_s < 0.0 {
            return Err(CoreError::invalid("measurement timestamp must be nonnegative"));
        }
        Ok(())
    }
}

/// On-disk feeder description; the sensitivity matrices are rebuilt from
/// the edge list so files stay compact and reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeederSpec {
    pub node_count: usize,
    pub phases: Vec<String>,
    pub edges: Vec<FeederEdge>,
    pub s_base_mw: f64,
    pub substation_v_pu: f64,
    /// Nominal demand per phase per node (MW), embedded in the base voltage.
    pub nominal_load_mw: Vec<Vec<f64>>,
    /// Nominal reactive demand per phase per node (MVAr).
    pub nominal_load_mvar: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loads_ref: Option<String>,
}

/// Generate a random radial feeder with the given node count.
///
/// Line impedances are drawn uniformly in `[0.2, 1.0] * impedance_scale`
/// p.u.; node demands are drawn from a fixed synthetic range. The result
/// is deterministic for a fixed seed.
pub fn build_synthetic_feeder(node_count: usize, seed: u64, impedance_scale: f64) -> Result<FeederModel> {
    if node_count < 2 {
        return Err(CoreError::invalid(format!(
            "node_count must be >= 2, got {node_count}"
        )));
    }
    if !(impedance_scale > 0.0) || !impedance_scale.is_finite() {
        return Err(CoreError::invalid("impedance_scale must be positive and finite"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Random attachment yields a radial tree rooted at node 0.
    let mut edges = Vec::with_capacity(node_count - 1);
    for node in 1..node_count {
        let parent = rng.gen_range(0..node);
        let r_pu = rng.gen_range(EDGE_IMPEDANCE_LO..=EDGE_IMPEDANCE_HI) * impedance_scale;
        let x_pu = rng.gen_range(EDGE_IMPEDANCE_LO..=EDGE_IMPEDANCE_HI) * impedance_scale;
        edges.push(FeederEdge { from: parent, to: node, r_pu, x_pu });
    }

    let mut nominal = NodalPq::zeros(node_count);
    for phase in 0..PHASE_COUNT {
        for node in 1..node_count {
            let p = rng.gen_range(NODE_LOAD_MW_LO..=NODE_LOAD_MW_HI);
            nominal.p_mw[phase][node] = p;
            nominal.q_mvar[phase][node] = p * NODE_LOAD_Q_FRACTION;
        }
    }

    from_parts(node_count, edges, nominal, S_BASE_MW, SUBSTATION_V_PU, None)
}

/// Assemble a model from explicit topology and nominal load.
pub fn from_parts(
    node_count: usize,
    edges: Vec<FeederEdge>,
    nominal_load: NodalPq,
    s_base_mw: f64,
    substation_v_pu: f64,
    loads_ref: Option<&str>,
) -> Result<FeederModel> {
    let _ = loads_ref;
    if node_count < 2 {
        return Err(CoreError::invalid("node_count must be >= 2"));
    }
    if edges.len() != node_count - 1 {
        return Err(CoreError::invalid(format!(
            "radial feeder needs exactly {} edges, got {}",
            node_count - 1,
            edges.len()
        )));
    }
    if nominal_load.node_count() != node_count {
        return Err(CoreError::invalid("nominal load dimension mismatch"));
    }
    if !(s_base_mw > 0.0) {
        return Err(CoreError::invalid("s_base_mw must be positive"));
    }

    // parent[n] = (parent node, cumulative r/x from root through n).
    let mut parent = vec![usize::MAX; node_count];
    let mut edge_r = vec![0.0_f64; node_count];
    let mut edge_x = vec![0.0_f64; node_count];
    for e in &edges {
        if e.to == 0 || e.to >= node_count || e.from >= node_count || parent[e.to] != usize::MAX {
            return Err(CoreError::invalid(format!(
                "edge {}->{} does not describe a tree rooted at node 0",
                e.from, e.to
            )));
        }
        if !(e.r_pu >= 0.0 && e.x_pu >= 0.0) {
            return Err(CoreError::invalid("edge impedances must be nonnegative"));
        }
        parent[e.to] = e.from;
        edge_r[e.to] = e.r_pu;
        edge_x[e.to] = e.x_pu;
    }

    let mut depth = vec![0_usize; node_count];
    let mut cum_r = vec![0.0_f64; node_count];
    let mut cum_x = vec![0.0_f64; node_count];
    for node in 1..node_count {
        // Walk to the root; detect cycles / disconnected nodes.
        let mut hops = 0;
        let mut cur = node;
        while cur != 0 {
            if parent[cur] == usize::MAX || hops > node_count {
                return Err(CoreError::invalid(format!("node {node} is not connected to the root")));
            }
            cur = parent[cur];
            hops += 1;
        }
        depth[node] = hops;
    }
    // Accumulate in depth order so parents are always resolved first.
    let mut order: Vec<usize> = (1..node_count).collect();
    order.sort_by_key(|&n| depth[n]);
    for &node in &order {
        cum_r[node] = cum_r[parent[node]] + edge_r[node];
        cum_x[node] = cum_x[parent[node]] + edge_x[node];
    }

    // Shared root-path impedance: r_sens[m][i] = 2 * sum of r over the
    // edges common to both root paths = 2 * cum_r[lca(m, i)].
    let lca = |mut a: usize, mut b: usize| -> usize {
        while depth[a] > depth[b] {
            a = parent[a];
        }
        while depth[b] > depth[a] {
            b = parent[b];
        }
        while a != b {
            a = parent[a];
            b = parent[b];
        }
        a
    };

    let mut r_mat = Array2::<f64>::zeros((node_count, node_count));
    let mut x_mat = Array2::<f64>::zeros((node_count, node_count));
    for m in 0..node_count {
        for i in m..node_count {
            let anc = lca(m, i);
            let r = 2.0 * cum_r[anc];
            let x = 2.0 * cum_x[anc];
            r_mat[[m, i]] = r;
            r_mat[[i, m]] = r;
            x_mat[[m, i]] = x;
            x_mat[[i, m]] = x;
        }
    }

    let base_voltage: [Array1<f64>; PHASE_COUNT] = std::array::from_fn(|phase| {
        let drop_r = r_mat.dot(&nominal_load.p_mw[phase]);
        let drop_x = x_mat.dot(&nominal_load.q_mvar[phase]);
        Array1::from_iter(
            (0..node_count).map(|n| substation_v_pu - (drop_r[n] + drop_x[n]) / s_base_mw),
        )
    });
    for v in &base_voltage {
        if v.iter().any(|&x| x <= 0.5 || x >= 1.5) {
            return Err(CoreError::invalid(
                "base voltage outside (0.5, 1.5) p.u.; lower impedance_scale or the nominal load",
            ));
        }
    }

    Ok(FeederModel {
        node_count,
        phases: Phase::ALL,
        r_sens: std::array::from_fn(|_| r_mat.clone()),
        x_sens: std::array::from_fn(|_| x_mat.clone()),
        base_voltage,
        nominal_load,
        s_base_mw,
        edges,
    })
}

impl FeederModel {
    fn check_dims(&self, injections: &NodalPq, loads: &NodalPq) -> Result<()> {
        if injections.node_count() != self.node_count || loads.node_count() != self.node_count {
            return Err(CoreError::invalid(format!(
                "dimension mismatch: model has {} nodes, injections {}, loads {}",
                self.node_count,
                injections.node_count(),
                loads.node_count()
            )));
        }
        Ok(())
    }

    /// Nodal voltage magnitudes (p.u.) under the given injections and loads.
    ///
    /// `v = base + R (p_inj - dp_load)/s_base + X (q_inj - dq_load)/s_base`,
    /// with load deviations taken against the nominal load.
    pub fn compute_voltages(&self, injections: &NodalPq, loads: &NodalPq) -> Result<[Array1<f64>; PHASE_COUNT]> {
        self.check_dims(injections, loads)?;
        Ok(std::array::from_fn(|phase| {
            let dp = &injections.p_mw[phase] - (&loads.p_mw[phase] - &self.nominal_load.p_mw[phase]);
            let dq = &injections.q_mvar[phase] - (&loads.q_mvar[phase] - &self.nominal_load.q_mvar[phase]);
            &self.base_voltage[phase]
                + &((self.r_sens[phase].dot(&dp) + self.x_sens[phase].dot(&dq)) / self.s_base_mw)
        }))
    }

    /// Per-phase feeder-head real power (MW); positive means import from
    /// the substation. Lossless balance: total load minus total injection.
    pub fn compute_feeder_head_power(&self, injections: &NodalPq, loads: &NodalPq) -> Result<[f64; PHASE_COUNT]> {
        self.check_dims(injections, loads)?;
        Ok(std::array::from_fn(|phase| {
            loads.p_mw[phase].sum() - injections.p_mw[phase].sum()
        }))
    }

    pub fn to_spec(&self, loads_ref: Option<String>) -> FeederSpec {
        FeederSpec {
            node_count: self.node_count,
            phases: self.phases.iter().map(|p| p.label().to_string()).collect(),
            edges: self.edges.clone(),
            s_base_mw: self.s_base_mw,
            substation_v_pu: SUBSTATION_V_PU,
            nominal_load_mw: self.nominal_load.p_mw.iter().map(|a| a.to_vec()).collect(),
            nominal_load_mvar: self.nominal_load.q_mvar.iter().map(|a| a.to_vec()).collect(),
            loads_ref,
        }
    }

    pub fn from_spec(spec: &FeederSpec) -> Result<FeederModel> {
        if spec.phases.len() != PHASE_COUNT {
            return Err(CoreError::invalid("feeder spec must list exactly 3 phases"));
        }
        if spec.nominal_load_mw.len() != PHASE_COUNT || spec.nominal_load_mvar.len() != PHASE_COUNT {
            return Err(CoreError::invalid("feeder spec nominal load must cover 3 phases"));
        }
        let mut nominal = NodalPq::zeros(spec.node_count);
        for phase in 0..PHASE_COUNT {
            if spec.nominal_load_mw[phase].len() != spec.node_count
                || spec.nominal_load_mvar[phase].len() != spec.node_count
            {
                return Err(CoreError::invalid("feeder spec nominal load dimension mismatch"));
            }
            nominal.p_mw[phase] = Array1::from_vec(spec.nominal_load_mw[phase].clone());
            nominal.q_mvar[phase] = Array1::from_vec(spec.nominal_load_mvar[phase].clone());
            if nominal.p_mw[phase].iter().any(|&p| p < 0.0) {
                return Err(CoreError::invalid("nominal real demand must be nonnegative"));
            }
        }
        from_parts(
            spec.node_count,
            spec.edges.clone(),
            nominal,
            spec.s_base_mw,
            spec.substation_v_pu,
            spec.loads_ref.as_deref(),
        )
    }
}
