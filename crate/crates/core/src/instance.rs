//! Problem instances: the validated runtime representation, the JSON file
//! schema, and the synthetic instance generator for the standard families.

use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edge::{EdgeCost, EdgeStageCost};
use crate::error::{Error, Result};
use crate::network::{build_incidence, GraphTopology, IncidenceMatrix};
use crate::prosumer::{BatteryParams, NodeModel, TankParams};
use crate::uncertainty::{FiniteDistribution, NoiseModel};

pub const SCHEMA_VERSION: u32 = 1;

/// A fully validated problem instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub topology: GraphTopology,
    pub incidence: IncidenceMatrix,
    pub horizon: usize,
    pub dt: f64,
    pub nodes: Vec<NodeModel>,
    /// `noise.stages[t][i]` is node `i`'s law of the noise revealed between
    /// stages `t` and `t+1`, with atoms `[d_hw, d_el]` (energies).
    pub noise: NoiseModel,
    pub edge_costs: Vec<EdgeCost>,
    /// Initial state per node, `[battery, tank]` or `[tank]`.
    pub x0: Vec<Vec<f64>>,
    pub generator: Option<GeneratorInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub family: String,
    pub seed: u64,
}

impl Instance {
    pub fn num_nodes(&self) -> usize {
        self.topology.num_nodes()
    }

    pub fn num_edges(&self) -> usize {
        self.topology.num_edges()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        let m = self.num_edges();
        let horizon = self.horizon;
        if horizon == 0 {
            return Err(Error::InvalidInstance("horizon must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidInstance("dt must be > 0".into()));
        }
        if self.nodes.len() != n || self.x0.len() != n {
            return Err(Error::InvalidInstance(
                "node array lengths do not match the topology".into(),
            ));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if (node.dt - self.dt).abs() > 1e-15 {
                return Err(Error::InvalidInstance(format!("node {i}: dt mismatch")));
            }
            node.validate(horizon)
                .map_err(|e| Error::InvalidInstance(format!("node {i}: {e}")))?;
            if self.x0[i].len() != node.state_dim() {
                return Err(Error::InvalidInstance(format!(
                    "node {i}: initial state has wrong dimension"
                )));
            }
            if !node.state_in_bounds(&self.x0[i]) {
                return Err(Error::InvalidInstance(format!(
                    "node {i}: initial state out of bounds"
                )));
            }
        }
        if self.noise.horizon() != horizon {
            return Err(Error::InvalidInstance("noise horizon mismatch".into()));
        }
        for (t, stage) in self.noise.stages.iter().enumerate() {
            if stage.len() != n {
                return Err(Error::InvalidInstance(format!(
                    "stage {t}: expected {n} node distributions"
                )));
            }
            for (i, dist) in stage.iter().enumerate() {
                for atom in dist.atoms() {
                    if atom.len() != 2 {
                        return Err(Error::InvalidInstance(format!(
                            "stage {t}, node {i}: noise atoms must be [d_hw, d_el]"
                        )));
                    }
                    if atom[0] < 0.0 {
                        return Err(Error::InvalidInstance(format!(
                            "stage {t}, node {i}: hot-water demand must be >= 0"
                        )));
                    }
                }
            }
        }
        if self.edge_costs.len() != m {
            return Err(Error::InvalidInstance(
                "edge cost array length does not match the topology".into(),
            ));
        }
        for (e, cost) in self.edge_costs.iter().enumerate() {
            if cost.stages.len() != horizon {
                return Err(Error::InvalidInstance(format!(
                    "edge {e}: cost stage count mismatch"
                )));
            }
            for (t, sc) in cost.stages.iter().enumerate() {
                sc.validate()
                    .map_err(|err| Error::InvalidInstance(format!("edge {e}, stage {t}: {err}")))?;
                if sc.quad == 0.0 && (!sc.q_min.is_finite() || !sc.q_max.is_finite()) {
                    return Err(Error::InvalidInstance(format!(
                        "edge {e}, stage {t}: a linear edge cost needs finite flow bounds"
                    )));
                }
            }
        }
        Ok(())
    }

    /// True when every import price is nonnegative (required by the global
    /// stage solver's battery split formulation).
    pub fn prices_nonnegative(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.import_price.iter().all(|&p| p >= 0.0))
    }
}

// --- file schema -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub atoms: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<BatteryParams>,
    pub tank: TankParams,
    pub import_max: f64,
    pub import_price: Vec<f64>,
    pub initial_state: Vec<f64>,
    /// One distribution per stage, atoms `[d_hw, d_el]`.
    pub demand: Vec<DistributionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    /// 1-based node indices.
    pub tail: usize,
    pub head: usize,
    pub stages: Vec<EdgeStageCost>,
}

/// On-disk instance document. Node indices in `edges` are 1-based; all
/// in-memory indices are 0-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub schema_version: u32,
    pub horizon: usize,
    pub dt: f64,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
}

impl InstanceFile {
    pub fn from_instance(inst: &Instance) -> Self {
        let nodes = inst
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| NodeSpec {
                battery: node.battery.clone(),
                tank: node.tank.clone(),
                import_max: node.import_max,
                import_price: node.import_price.clone(),
                initial_state: inst.x0[i].clone(),
                demand: (0..inst.horizon)
                    .map(|t| {
                        let d = &inst.noise.stages[t][i];
                        DistributionSpec {
                            atoms: d.atoms().to_vec(),
                            probabilities: d.probabilities().to_vec(),
                        }
                    })
                    .collect(),
            })
            .collect();
        let edges = inst
            .topology
            .edges()
            .iter()
            .zip(&inst.edge_costs)
            .map(|(&(tail, head), cost)| EdgeSpec {
                tail: tail + 1,
                head: head + 1,
                stages: cost.stages.clone(),
            })
            .collect();
        InstanceFile {
            schema_version: SCHEMA_VERSION,
            horizon: inst.horizon,
            dt: inst.dt,
            nodes,
            edges,
            generator: inst.generator.clone(),
        }
    }

    pub fn into_instance(self) -> Result<Instance> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInstance(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        let n = self.nodes.len();
        let mut edges = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            if e.tail == 0 || e.head == 0 || e.tail > n || e.head > n {
                return Err(Error::InvalidInstance(format!(
                    "edge endpoints must be in 1..={n}"
                )));
            }
            edges.push((e.tail - 1, e.head - 1));
        }
        let topology = GraphTopology::new(n, edges)?;
        let incidence = build_incidence(&topology);
        let mut nodes = Vec::with_capacity(n);
        let mut x0 = Vec::with_capacity(n);
        let mut stages: Vec<Vec<FiniteDistribution>> =
            vec![Vec::with_capacity(n); self.horizon];
        for (i, spec) in self.nodes.into_iter().enumerate() {
            if spec.demand.len() != self.horizon {
                return Err(Error::InvalidInstance(format!(
                    "node {i}: demand must have one distribution per stage"
                )));
            }
            for (t, d) in spec.demand.into_iter().enumerate() {
                let dist = FiniteDistribution::new(d.atoms, d.probabilities).map_err(|e| {
                    Error::InvalidInstance(format!("node {i}, stage {t}: {e}"))
                })?;
                stages[t].push(dist);
            }
            nodes.push(NodeModel {
                battery: spec.battery,
                tank: spec.tank,
                import_max: spec.import_max,
                dt: self.dt,
                import_price: spec.import_price,
            });
            x0.push(spec.initial_state);
        }
        let edge_costs = self
            .edges
            .into_iter()
            .map(|e| EdgeCost { stages: e.stages })
            .collect();
        let inst = Instance {
            topology,
            incidence,
            horizon: self.horizon,
            dt: self.dt,
            nodes,
            noise: NoiseModel { stages },
            edge_costs,
            x0,
            generator: self.generator,
        };
        inst.validate()?;
        Ok(inst)
    }
}

pub fn save_instance(inst: &Instance, path: &std::path::Path) -> Result<()> {
    let file = InstanceFile::from_instance(inst);
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_instance(path: &std::path::Path) -> Result<Instance> {
    let text = std::fs::read_to_string(path)?;
    let file: InstanceFile = serde_json::from_str(&text)?;
    file.into_instance()
}

// --- generator --------------------------------------------------------------

/// Node/edge counts and battery counts of the standard families.
pub fn family_shape(num_nodes: usize) -> Option<(usize, usize)> {
    match num_nodes {
        3 => Some((3, 1)),
        6 => Some((7, 2)),
        12 => Some((16, 4)),
        24 => Some((33, 8)),
        48 => Some((69, 16)),
        _ => None,
    }
}

pub const GENERATED_HORIZON: usize = 96;
pub const GENERATED_DT: f64 = 0.25;
const ATOMS_PER_STAGE: usize = 10;

/// Quarter-hourly daily shapes over `T = 96` steps (synthetic; the families
/// only fix sizes, not data).
fn electric_profile(t: usize) -> f64 {
    let hour = t as f64 * 0.25;
    let morning = (-((hour - 7.5) / 1.8).powi(2)).exp();
    let evening = (-((hour - 19.5) / 2.2).powi(2)).exp();
    0.25 + 0.9 * morning + 1.3 * evening
}

fn hot_water_profile(t: usize) -> f64 {
    let hour = t as f64 * 0.25;
    let morning = (-((hour - 7.0) / 1.0).powi(2)).exp();
    let evening = (-((hour - 21.0) / 1.5).powi(2)).exp();
    0.05 + 0.8 * morning + 0.6 * evening
}

// Sized so the worst-case midday surplus (production minus load, ~0.27 kW)
// stays below what a full tank can absorb through conduction loss and below
// one step of the coarsest heating-control grid. Larger panels make autarkic
// operation infeasible on long horizons, which resource coordination needs
// as its starting point.
fn solar_profile(t: usize) -> f64 {
    let hour = t as f64 * 0.25;
    (-((hour - 12.5) / 3.0).powi(2)).exp() * 0.3
}

fn time_of_use_price(t: usize) -> f64 {
    let hour = t as f64 * 0.25;
    if (7.0..23.0).contains(&hour) {
        0.18
    } else {
        0.11
    }
}

/// Generates a connected synthetic instance. `num_edges >= num_nodes - 1`;
/// `num_batteries <= num_nodes`. Solar nodes are chosen adjacent to battery
/// nodes.
pub fn generate_custom(
    num_nodes: usize,
    num_edges: usize,
    num_batteries: usize,
    seed: u64,
    family: &str,
) -> Result<Instance> {
    if num_nodes == 0 {
        return Err(Error::InvalidParameter("need at least one node".into()));
    }
    if num_nodes > 1 && num_edges < num_nodes - 1 {
        return Err(Error::InvalidParameter(
            "a connected graph needs at least num_nodes - 1 edges".into(),
        ));
    }
    if num_batteries > num_nodes {
        return Err(Error::InvalidParameter("more batteries than nodes".into()));
    }
    let max_edges = num_nodes * num_nodes.saturating_sub(1) / 2;
    if num_edges > max_edges {
        return Err(Error::InvalidParameter(
            "edge count exceeds the simple-graph maximum".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = GENERATED_HORIZON;
    let dt = GENERATED_DT;

    // random spanning tree, then extra distinct edges
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(num_edges);
    let mut present = std::collections::HashSet::new();
    for i in 1..num_nodes {
        let j = rng.random_range(0..i);
        edges.push((j, i));
        present.insert((j, i));
    }
    while edges.len() < num_edges {
        let a = rng.random_range(0..num_nodes);
        let b = rng.random_range(0..num_nodes);
        let (lo, hi) = (a.min(b), a.max(b));
        if lo == hi || present.contains(&(lo, hi)) {
            continue;
        }
        edges.push((lo, hi));
        present.insert((lo, hi));
    }
    let topology = GraphTopology::new(num_nodes, edges)?;
    let incidence = build_incidence(&topology);

    // battery nodes spread evenly; solar nodes picked among their neighbours
    let battery_nodes: Vec<usize> = (0..num_batteries)
        .map(|k| k * num_nodes / num_batteries.max(1))
        .collect();
    let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
    for &(a, b) in topology.edges() {
        neighbours[a].push(b);
        neighbours[b].push(a);
    }
    let mut solar = vec![false; num_nodes];
    for &b in &battery_nodes {
        if let Some(&s) = neighbours[b].first() {
            solar[s] = true;
        } else if num_nodes == 1 {
            solar[b] = true;
        }
    }

    let prices: Vec<f64> = (0..horizon).map(time_of_use_price).collect();
    let mut nodes = Vec::with_capacity(num_nodes);
    let mut x0 = Vec::with_capacity(num_nodes);
    let mut stages: Vec<Vec<FiniteDistribution>> = vec![Vec::new(); horizon];
    for i in 0..num_nodes {
        let battery = if battery_nodes.contains(&i) {
            Some(BatteryParams {
                auto_discharge: 0.995,
                charge_yield: 0.95,
                discharge_yield: 0.95,
                level_min: 0.0,
                level_max: 3.0,
                power_min: -1.5,
                power_max: 1.5,
            })
        } else {
            None
        };
        // conduction sized so a full tank sheds at least one step of a
        // 5-point heating-control grid per stage; together with the solar
        // sizing this keeps autarkic operation feasible from every state
        let tank = TankParams {
            conduction_loss: 0.98,
            conversion: 0.9,
            level_min: 0.0,
            level_max: 10.0,
            heat_power_max: 3.0,
            level_ref: 4.0,
            penalty_rate: 0.4,
        };
        let scale = 0.8 + 0.4 * rng.random::<f64>();
        let mut peak_power: f64 = 0.0;
        for t in 0..horizon {
            let mut atoms = Vec::with_capacity(ATOMS_PER_STAGE);
            for _ in 0..ATOMS_PER_STAGE {
                let mut d_el =
                    electric_profile(t) * scale * (0.75 + 0.5 * rng.random::<f64>()) * dt;
                if solar[i] {
                    d_el -= solar_profile(t) * (0.6 + 0.8 * rng.random::<f64>()) * dt;
                }
                let d_hw = hot_water_profile(t) * scale * (0.6 + 0.8 * rng.random::<f64>()) * dt;
                peak_power = peak_power.max(d_el / dt);
                atoms.push(vec![d_hw, d_el]);
            }
            let probs = vec![1.0 / ATOMS_PER_STAGE as f64; ATOMS_PER_STAGE];
            stages[t].push(FiniteDistribution::new(atoms, probs)?);
        }
        // import cap sized so recourse always exists: worst demand plus full
        // heating plus full battery charge, with slack
        let device_power = tank.heat_power_max + battery.as_ref().map_or(0.0, |b| b.power_max);
        let import_max = 3.0 * (peak_power.max(0.1) + device_power);
        let mut state = Vec::new();
        if battery.is_some() {
            state.push(1.5);
        }
        state.push(4.0);
        x0.push(state);
        nodes.push(NodeModel {
            battery,
            tank,
            import_max,
            dt,
            import_price: prices.clone(),
        });
    }

    let edge_costs = (0..topology.num_edges())
        .map(|_| {
            let quad = 0.004 + 0.004 * rng.random::<f64>();
            let lin = 0.01 * rng.random::<f64>();
            EdgeCost::uniform(quad, lin, -8.0, 8.0, horizon)
        })
        .collect();

    let inst = Instance {
        topology,
        incidence,
        horizon,
        dt,
        nodes,
        noise: NoiseModel { stages },
        edge_costs,
        x0,
        generator: Some(GeneratorInfo {
            family: family.to_string(),
            seed,
        }),
    };
    inst.validate()?;
    Ok(inst)
}

/// Generates one of the standard families (3, 6, 12, 24 or 48 nodes).
pub fn generate_family(num_nodes: usize, seed: u64) -> Result<Instance> {
    let (num_edges, num_batteries) = family_shape(num_nodes).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "unknown family {num_nodes}; choose one of 3, 6, 12, 24, 48"
        ))
    })?;
    generate_custom(
        num_nodes,
        num_edges,
        num_batteries,
        seed,
        &format!("{num_nodes}-nodes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_shapes_match_reference_sizes() {
        for (n, e, b) in [(3, 3, 1), (6, 7, 2), (12, 16, 4), (24, 33, 8), (48, 69, 16)] {
            assert_eq!(family_shape(n), Some((e, b)));
            let state_dim = n + b;
            assert_eq!(
                state_dim,
                match n {
                    3 => 4,
                    6 => 8,
                    12 => 16,
                    24 => 32,
                    48 => 64,
                    _ => unreachable!(),
                }
            );
        }
        assert_eq!(family_shape(5), None);
    }

    #[test]
    fn generated_twelve_nodes_is_valid_and_connected() {
        let inst = generate_family(12, 7).unwrap();
        assert_eq!(inst.num_nodes(), 12);
        assert_eq!(inst.num_edges(), 16);
        assert_eq!(inst.topology.num_components(), 1);
        assert_eq!(inst.horizon, 96);
        let batteries = inst.nodes.iter().filter(|n| n.battery.is_some()).count();
        assert_eq!(batteries, 4);
        let state_dim: usize = inst.nodes.iter().map(|n| n.state_dim()).sum();
        assert_eq!(state_dim, 16);
        assert!(inst.prices_nonnegative());
        inst.validate().unwrap();
    }

    #[test]
    fn generation_is_seed_reproducible() {
        let a = generate_family(3, 42).unwrap();
        let b = generate_family(3, 42).unwrap();
        let ja = serde_json::to_string(&InstanceFile::from_instance(&a)).unwrap();
        let jb = serde_json::to_string(&InstanceFile::from_instance(&b)).unwrap();
        assert_eq!(ja, jb);
        let c = generate_family(3, 43).unwrap();
        let jc = serde_json::to_string(&InstanceFile::from_instance(&c)).unwrap();
        assert_ne!(ja, jc);
    }

    #[test]
    fn file_round_trip_is_semantically_identical() {
        let inst = generate_family(6, 5).unwrap();
        let file = InstanceFile::from_instance(&inst);
        let text = serde_json::to_string(&file).unwrap();
        let parsed: InstanceFile = serde_json::from_str(&text).unwrap();
        let inst2 = parsed.into_instance().unwrap();
        let text2 = serde_json::to_string(&InstanceFile::from_instance(&inst2)).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let inst = generate_family(3, 1).unwrap();
        let mut v: serde_json::Value =
            serde_json::to_value(InstanceFile::from_instance(&inst)).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        assert!(serde_json::from_value::<InstanceFile>(v).is_err());
    }

    #[test]
    fn validation_rejects_linear_edge_without_bounds() {
        let mut inst = generate_family(3, 1).unwrap();
        inst.edge_costs[0].stages[0].quad = 0.0;
        inst.edge_costs[0].stages[0].q_min = f64::NEG_INFINITY;
        assert!(inst.validate().is_err());
    }

    #[test]
    fn validation_rejects_bad_initial_state() {
        let mut inst = generate_family(3, 1).unwrap();
        inst.x0[0][0] = 1e9;
        assert!(inst.validate().is_err());
    }

    #[test]
    fn solar_nodes_are_adjacent_to_battery_nodes() {
        for seed in [1, 2, 3] {
            let inst = generate_family(12, seed).unwrap();
            let battery: Vec<bool> = inst.nodes.iter().map(|n| n.battery.is_some()).collect();
            // any node whose demand can be negative at midday is a solar node
            let midday = 50;
            for i in 0..inst.num_nodes() {
                let has_production = inst.noise.stages[midday][i]
                    .atoms()
                    .iter()
                    .any(|a| a[1] < 0.0);
                if has_production {
                    let adjacent_battery = inst
                        .topology
                        .edges()
                        .iter()
                        .any(|&(a, b)| (a == i && battery[b]) || (b == i && battery[a]));
                    assert!(adjacent_battery, "solar node {i} has no battery neighbour");
                }
            }
        }
    }
}
