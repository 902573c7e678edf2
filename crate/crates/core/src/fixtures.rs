//! Small reference instances with integer data, unit stage length, and
//! storage ranges chosen so every reachable state lies exactly on the
//! tabulation grids used in tests. With exact grids, dynamic-programming
//! values are free of interpolation error, which makes tight cross-checks
//! against exhaustive enumeration meaningful.

use crate::edge::EdgeCost;
use crate::instance::{GeneratorInfo, Instance};
use crate::network::{build_incidence, GraphTopology};
use crate::prosumer::{BatteryParams, NodeModel, TankParams};
use crate::uncertainty::{FiniteDistribution, NoiseModel};

/// State-grid points per dimension that make [`tiny_instance`] grid-exact.
pub const TINY_STATE_POINTS: usize = 5;
/// Control-grid points per dimension that make [`tiny_instance`] grid-exact.
pub const TINY_CONTROL_POINTS: usize = 3;
/// Flow-grid points making the exhaustive oracle exact on [`tiny_instance`].
pub const TINY_FLOW_POINTS: usize = 5;

fn exact_tank() -> TankParams {
    TankParams {
        conduction_loss: 1.0,
        conversion: 1.0,
        level_min: 0.0,
        level_max: 4.0,
        heat_power_max: 2.0,
        level_ref: 2.0,
        penalty_rate: 3.0,
    }
}

/// Two nodes joined by one edge, three stages, two atoms per stage and node.
///
/// Node 0 carries a lossless battery and a hot-water tank, node 1 a tank
/// only. All demands, storage steps, and price levels are integers, so with
/// [`TINY_STATE_POINTS`] state points and [`TINY_CONTROL_POINTS`] control
/// points per dimension every reachable state is a grid point. The linear
/// edge cost keeps one-stage optima at integer flows, hence on the oracle's
/// flow grid as well.
pub fn tiny_instance() -> Instance {
    let topology = GraphTopology::new(2, vec![(0, 1)]).unwrap();
    let incidence = build_incidence(&topology);
    let battery = BatteryParams {
        auto_discharge: 1.0,
        charge_yield: 1.0,
        discharge_yield: 1.0,
        level_min: 0.0,
        level_max: 4.0,
        power_min: -2.0,
        power_max: 2.0,
    };
    let node0 = NodeModel {
        battery: Some(battery),
        tank: exact_tank(),
        import_max: 12.0,
        dt: 1.0,
        import_price: vec![1.0, 2.0, 1.0],
    };
    let node1 = NodeModel {
        battery: None,
        tank: exact_tank(),
        import_max: 12.0,
        dt: 1.0,
        import_price: vec![3.0, 1.0, 2.0],
    };
    let mk = |atoms: Vec<Vec<f64>>| FiniteDistribution::new(atoms, vec![0.5, 0.5]).unwrap();
    let noise = NoiseModel {
        stages: vec![
            vec![
                mk(vec![vec![1.0, 1.0], vec![0.0, 2.0]]),
                mk(vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
            ],
            vec![
                mk(vec![vec![0.0, 2.0], vec![1.0, 1.0]]),
                mk(vec![vec![0.0, 0.0], vec![0.0, 1.0]]),
            ],
            vec![
                mk(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
                mk(vec![vec![1.0, 2.0], vec![0.0, 1.0]]),
            ],
        ],
    };
    Instance {
        topology,
        incidence,
        horizon: 3,
        dt: 1.0,
        nodes: vec![node0, node1],
        noise,
        edge_costs: vec![EdgeCost::uniform(0.0, 0.5, -2.0, 2.0, 3)],
        x0: vec![vec![2.0, 2.0], vec![2.0]],
        generator: Some(GeneratorInfo {
            family: "tiny-reference".into(),
            seed: 0,
        }),
    }
}

/// [`tiny_instance`] with each stage noise collapsed to its first atom.
pub fn tiny_deterministic() -> Instance {
    let mut inst = tiny_instance();
    let stages = inst
        .noise
        .stages
        .iter()
        .map(|dists| {
            dists
                .iter()
                .map(|d| {
                    FiniteDistribution::new(vec![d.atoms()[0].clone()], vec![1.0]).unwrap()
                })
                .collect()
        })
        .collect();
    inst.noise = NoiseModel { stages };
    inst
}

/// One node, no edges, three stages, grid-exact like [`tiny_instance`].
///
/// `import_price` is the per-stage electricity price for all three stages.
/// With a zero price the coupling-free relaxation and the autarkic problem
/// coincide exactly: every stage cost vanishes and the two problems share
/// controls and dynamics.
pub fn single_node_instance(price: f64) -> Instance {
    let topology = GraphTopology::new(1, vec![]).unwrap();
    let incidence = build_incidence(&topology);
    // reference level at the top of the range and an empty initial tank keep
    // the terminal penalty active, so the value is nontrivial even at zero
    // electricity price
    let mut tank = exact_tank();
    tank.level_ref = 4.0;
    let node = NodeModel {
        battery: None,
        tank,
        import_max: 10.0,
        dt: 1.0,
        import_price: vec![price; 3],
    };
    let mk = |atoms: Vec<Vec<f64>>| FiniteDistribution::new(atoms, vec![0.5, 0.5]).unwrap();
    let noise = NoiseModel {
        stages: vec![
            vec![mk(vec![vec![1.0, 1.0], vec![0.0, 2.0]])],
            vec![mk(vec![vec![1.0, 0.0], vec![0.0, 1.0]])],
            vec![mk(vec![vec![1.0, 2.0], vec![0.0, 0.0]])],
        ],
    };
    Instance {
        topology,
        incidence,
        horizon: 3,
        dt: 1.0,
        nodes: vec![node],
        noise,
        edge_costs: vec![],
        x0: vec![vec![0.0]],
        generator: Some(GeneratorInfo {
            family: "single-node-reference".into(),
            seed: 0,
        }),
    }
}
