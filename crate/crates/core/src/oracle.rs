//! Brute-force exact solver for tiny instances. Ground truth for the bound
//! and DP tests: backward induction on exact reachable states (no
//! interpolation), with flows enumerated on a grid and the balance
//! `A q + f = 0` enforced exactly via `f = -A q`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::prosumer::{battery_step, stage_cost, tank_step, terminal_cost};

const EVAL_LIMIT: u64 = 10_000_000;
const BOUNDS_EPS: f64 = 1e-9;

/// Per-node and per-edge control grids for the exhaustive search.
#[derive(Debug, Clone)]
pub struct OracleGrids {
    /// Battery power grid per node (`[0.0]` for nodes without a battery).
    pub u_b: Vec<Vec<f64>>,
    /// Heating power grid per node.
    pub u_t: Vec<Vec<f64>>,
    /// Flow grid per edge.
    pub q: Vec<Vec<f64>>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || lo == hi {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl OracleGrids {
    /// Regular grids over the device and flow bounds (flow bounds taken from
    /// stage 0; generated instances use stage-uniform edge bounds).
    pub fn regular(instance: &Instance, control_points: usize, flow_points: usize) -> Self {
        let u_b = instance
            .nodes
            .iter()
            .map(|n| match &n.battery {
                Some(b) => linspace(b.power_min, b.power_max, control_points),
                None => vec![0.0],
            })
            .collect();
        let u_t = instance
            .nodes
            .iter()
            .map(|n| linspace(0.0, n.tank.heat_power_max, control_points))
            .collect();
        let q = instance
            .edge_costs
            .iter()
            .map(|c| linspace(c.stages[0].q_min, c.stages[0].q_max, flow_points))
            .collect();
        OracleGrids { u_b, u_t, q }
    }
}

/// Odometer over a mixed-radix index space; yields every combination.
struct MultiIndex {
    radices: Vec<usize>,
    idx: Vec<usize>,
    done: bool,
}

impl MultiIndex {
    fn new(radices: Vec<usize>) -> Self {
        let done = radices.iter().any(|&r| r == 0);
        let idx = vec![0; radices.len()];
        Self { radices, idx, done }
    }
}

impl Iterator for MultiIndex {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let mut k = 0;
        loop {
            if k == self.radices.len() {
                self.done = true;
                break;
            }
            self.idx[k] += 1;
            if self.idx[k] < self.radices[k] {
                break;
            }
            self.idx[k] = 0;
            k += 1;
        }
        Some(out)
    }
}

struct OracleContext<'a> {
    instance: &'a Instance,
    grids: &'a OracleGrids,
    memo: HashMap<(usize, Vec<u64>), f64>,
    evals: u64,
}

impl<'a> OracleContext<'a> {
    fn state_key(&self, t: usize, x: &[Vec<f64>]) -> (usize, Vec<u64>) {
        let bits = x.iter().flatten().map(|v| v.to_bits()).collect();
        (t, bits)
    }

    /// Next global state for one joint noise and one joint control; `None`
    /// when any node leaves its bounds or its import range.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        t: usize,
        x: &[Vec<f64>],
        noise: &[[f64; 2]],
        u_b: &[f64],
        u_t: &[f64],
        flows: &[f64],
    ) -> Option<(Vec<Vec<f64>>, f64)> {
        let dt = self.instance.dt;
        let mut next = Vec::with_capacity(x.len());
        let mut cost = 0.0;
        for (i, node) in self.instance.nodes.iter().enumerate() {
            self.evals += 1;
            let [d_hw, d_el] = noise[i];
            let u_ne = flows[i] + d_el / dt + u_b[i] + u_t[i];
            if u_ne < -BOUNDS_EPS || u_ne > node.import_max + BOUNDS_EPS {
                return None;
            }
            let u_ne = u_ne.clamp(0.0, node.import_max);
            let mut xs = Vec::with_capacity(node.state_dim());
            if let Some(b) = &node.battery {
                let nb = battery_step(b, x[i][0], u_b[i], dt);
                if nb < b.level_min - BOUNDS_EPS || nb > b.level_max + BOUNDS_EPS {
                    return None;
                }
                xs.push(nb);
            }
            let tank = &node.tank;
            let h = *x[i].last().unwrap();
            let nh = tank_step(tank, h, u_t[i], d_hw, dt);
            if nh < tank.level_min - BOUNDS_EPS || nh > tank.level_max + BOUNDS_EPS {
                return None;
            }
            xs.push(nh);
            next.push(xs);
            cost += stage_cost(node.import_price[t], u_ne, dt);
        }
        Some((next, cost))
    }

    fn value(&mut self, t: usize, x: &[Vec<f64>]) -> Result<f64> {
        let inst = self.instance;
        if t == inst.horizon {
            return Ok(inst
                .nodes
                .iter()
                .zip(x)
                .map(|(n, xs)| terminal_cost(&n.tank, xs))
                .sum());
        }
        let key = self.state_key(t, x);
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let n = inst.num_nodes();
        let m = inst.num_edges();
        let dists = &inst.noise.stages[t];
        let mut expected = 0.0;
        for atom_idx in MultiIndex::new(dists.iter().map(|d| d.atoms().len()).collect()) {
            let mut prob = 1.0;
            let mut noise = vec![[0.0; 2]; n];
            for i in 0..n {
                prob *= dists[i].probabilities()[atom_idx[i]];
                let a = &dists[i].atoms()[atom_idx[i]];
                noise[i] = [a[0], a[1]];
            }
            if prob == 0.0 {
                continue;
            }
            let mut best = f64::INFINITY;
            for q_idx in MultiIndex::new(self.grids.q.iter().map(Vec::len).collect()) {
                let q: Vec<f64> = (0..m).map(|e| self.grids.q[e][q_idx[e]]).collect();
                let mut edge_cost = 0.0;
                let mut q_ok = true;
                for (e, &qe) in q.iter().enumerate() {
                    let sc = &inst.edge_costs[e].stages[t];
                    if qe < sc.q_min - BOUNDS_EPS || qe > sc.q_max + BOUNDS_EPS {
                        q_ok = false;
                        break;
                    }
                    edge_cost += sc.cost(qe);
                }
                if !q_ok {
                    continue;
                }
                let aq = inst.incidence.apply(&q);
                let flows: Vec<f64> = aq.iter().map(|v| -v).collect();
                let mut radices = Vec::with_capacity(2 * n);
                for i in 0..n {
                    radices.push(self.grids.u_b[i].len());
                    radices.push(self.grids.u_t[i].len());
                }
                for c_idx in MultiIndex::new(radices) {
                    if self.evals > EVAL_LIMIT {
                        return Err(Error::OracleTooLarge {
                            count: self.evals,
                            limit: EVAL_LIMIT,
                        });
                    }
                    let u_b: Vec<f64> =
                        (0..n).map(|i| self.grids.u_b[i][c_idx[2 * i]]).collect();
                    let u_t: Vec<f64> =
                        (0..n).map(|i| self.grids.u_t[i][c_idx[2 * i + 1]]).collect();
                    let Some((next, node_cost)) = self.step(t, x, &noise, &u_b, &u_t, &flows)
                    else {
                        continue;
                    };
                    let tail = self.value(t + 1, &next)?;
                    if tail.is_finite() {
                        best = best.min(node_cost + edge_cost + tail);
                    }
                }
            }
            expected += prob * best;
        }
        self.memo.insert(key, expected);
        Ok(expected)
    }
}

/// Exact hazard-decision optimum over the full scenario tree with controls
/// restricted to the given grids. Errs when the enumeration would exceed the
/// evaluation guard.
pub fn exhaustive_solve(instance: &Instance, x0: &[Vec<f64>], grids: &OracleGrids) -> Result<f64> {
    instance.validate()?;
    let mut ctx = OracleContext {
        instance,
        grids,
        memo: HashMap::new(),
        evals: 0,
    };
    ctx.value(0, x0)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::edge::EdgeCost;
    use crate::instance::GeneratorInfo;
    use crate::network::{build_incidence, GraphTopology};
    use crate::prosumer::{BatteryParams, NodeModel, TankParams};
    use crate::uncertainty::{FiniteDistribution, NoiseModel};

    fn inert_tank() -> TankParams {
        TankParams {
            conduction_loss: 1.0,
            conversion: 1.0,
            level_min: 0.0,
            level_max: 10.0,
            heat_power_max: 0.0,
            level_ref: 0.0,
            penalty_rate: 0.0,
        }
    }

    /// Single node, no edges, dt = 1, unit price, demand forced through
    /// imports.
    fn single_node_instance(demand_atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> Instance {
        let topology = GraphTopology::new(1, vec![]).unwrap();
        let incidence = build_incidence(&topology);
        let node = NodeModel {
            battery: None,
            tank: inert_tank(),
            import_max: 10.0,
            dt: 1.0,
            import_price: vec![1.0],
        };
        Instance {
            topology,
            incidence,
            horizon: 1,
            dt: 1.0,
            nodes: vec![node],
            noise: NoiseModel {
                stages: vec![vec![FiniteDistribution::new(demand_atoms, probs).unwrap()]],
            },
            edge_costs: vec![],
            x0: vec![vec![5.0]],
            generator: None,
        }
    }

    #[test]
    fn deterministic_linear_minimum() {
        // forced autarky: u_ne = d_el = 2, cost = 2
        let inst = single_node_instance(vec![vec![0.0, 2.0]], vec![1.0]);
        let grids = OracleGrids::regular(&inst, 1, 1);
        let v = exhaustive_solve(&inst, &inst.x0, &grids).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn expectation_of_per_atom_minima() {
        // atoms with forced costs 1 and 3 -> hazard-decision value 2
        let inst = single_node_instance(
            vec![vec![0.0, 1.0], vec![0.0, 3.0]],
            vec![0.5, 0.5],
        );
        let grids = OracleGrids::regular(&inst, 1, 1);
        let v = exhaustive_solve(&inst, &inst.x0, &grids).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    /// Two nodes joined by one edge, T = 2, 2 atoms per stage; dt = 1 and
    /// integer data so all reachable states are exact.
    pub(crate) fn two_node_instance() -> Instance {
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
        let mut tank = inert_tank();
        tank.heat_power_max = 2.0;
        tank.conversion = 1.0;
        tank.level_ref = 2.0;
        tank.penalty_rate = 3.0;
        let node0 = NodeModel {
            battery: Some(battery),
            tank: tank.clone(),
            import_max: 12.0,
            dt: 1.0,
            import_price: vec![1.0, 2.0],
        };
        let node1 = NodeModel {
            battery: None,
            tank,
            import_max: 12.0,
            dt: 1.0,
            import_price: vec![3.0, 1.0],
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
            ],
        };
        Instance {
            topology,
            incidence,
            horizon: 2,
            dt: 1.0,
            nodes: vec![node0, node1],
            noise,
            edge_costs: vec![EdgeCost::uniform(0.0, 0.5, -2.0, 2.0, 2)],
            x0: vec![vec![2.0, 2.0], vec![2.0]],
            generator: Some(GeneratorInfo {
                family: "two-node-reference".into(),
                seed: 0,
            }),
        }
    }

    fn reference_grids(inst: &Instance) -> OracleGrids {
        // integer steps keep every reachable state exact
        OracleGrids::regular(inst, 5, 5)
    }

    /// Second, independently structured enumeration: explicit depth-first
    /// recursion over (stage, atom, q, controls) without memoization.
    fn dfs_value(inst: &Instance, t: usize, x: &[Vec<f64>], grids: &OracleGrids) -> f64 {
        if t == inst.horizon {
            return inst
                .nodes
                .iter()
                .zip(x)
                .map(|(n, xs)| terminal_cost(&n.tank, xs))
                .sum();
        }
        let dists = &inst.noise.stages[t];
        let n = inst.num_nodes();
        let mut expected = 0.0;
        for joint in MultiIndex::new(dists.iter().map(|d| d.atoms().len()).collect()) {
            let prob: f64 = (0..n).map(|i| dists[i].probabilities()[joint[i]]).product();
            let mut best = f64::INFINITY;
            for q_idx in MultiIndex::new(grids.q.iter().map(Vec::len).collect()) {
                let q: Vec<f64> = q_idx
                    .iter()
                    .enumerate()
                    .map(|(e, &k)| grids.q[e][k])
                    .collect();
                let edge_cost: f64 = q
                    .iter()
                    .enumerate()
                    .map(|(e, &qe)| inst.edge_costs[e].stages[t].cost(qe))
                    .sum();
                let aq = inst.incidence.apply(&q);
                let mut radices = Vec::new();
                for i in 0..n {
                    radices.push(grids.u_b[i].len());
                    radices.push(grids.u_t[i].len());
                }
                'combo: for c in MultiIndex::new(radices) {
                    let mut next = Vec::with_capacity(n);
                    let mut cost = edge_cost;
                    for (i, node) in inst.nodes.iter().enumerate() {
                        let a = &dists[i].atoms()[joint[i]];
                        let (u_b, u_t) = (grids.u_b[i][c[2 * i]], grids.u_t[i][c[2 * i + 1]]);
                        let u_ne = -aq[i] + a[1] / inst.dt + u_b + u_t;
                        if u_ne < -BOUNDS_EPS || u_ne > node.import_max + BOUNDS_EPS {
                            continue 'combo;
                        }
                        let mut xs = Vec::new();
                        if let Some(b) = &node.battery {
                            let nb = battery_step(b, x[i][0], u_b, inst.dt);
                            if nb < b.level_min - BOUNDS_EPS || nb > b.level_max + BOUNDS_EPS {
                                continue 'combo;
                            }
                            xs.push(nb);
                        }
                        let nh = tank_step(&node.tank, *x[i].last().unwrap(), u_t, a[0], inst.dt);
                        if nh < node.tank.level_min - BOUNDS_EPS
                            || nh > node.tank.level_max + BOUNDS_EPS
                        {
                            continue 'combo;
                        }
                        xs.push(nh);
                        next.push(xs);
                        cost += stage_cost(
                            node.import_price[t],
                            u_ne.clamp(0.0, node.import_max),
                            inst.dt,
                        );
                    }
                    let v = cost + dfs_value(inst, t + 1, &next, grids);
                    if v < best {
                        best = v;
                    }
                }
            }
            expected += prob * best;
        }
        expected
    }

    #[test]
    fn memoized_and_dfs_enumerations_agree() {
        let inst = two_node_instance();
        let grids = reference_grids(&inst);
        let memoized = exhaustive_solve(&inst, &inst.x0, &grids).unwrap();
        let dfs = dfs_value(&inst, 0, &inst.x0, &grids);
        assert!(memoized.is_finite());
        assert!(
            (memoized - dfs).abs() < 1e-12,
            "memoized {memoized} vs dfs {dfs}"
        );
    }

    #[test]
    fn invariant_under_node_relabeling_and_edge_flip() {
        let inst = two_node_instance();
        let grids = reference_grids(&inst);
        let v = exhaustive_solve(&inst, &inst.x0, &grids).unwrap();

        // relabel the nodes: the same physical edge reads (1, 0) in the new
        // labels, costs unchanged
        let topology = GraphTopology::new(2, vec![(1, 0)]).unwrap();
        let incidence = build_incidence(&topology);
        let mut relabeled = inst.clone();
        relabeled.topology = topology.clone();
        relabeled.incidence = incidence.clone();
        relabeled.nodes.swap(0, 1);
        relabeled.x0.swap(0, 1);
        for stage in &mut relabeled.noise.stages {
            stage.swap(0, 1);
        }
        let v2 = exhaustive_solve(&relabeled, &relabeled.x0, &reference_grids(&relabeled)).unwrap();
        assert!((v - v2).abs() < 1e-12, "relabel: {v} vs {v2}");

        // flip the edge orientation, keeping labels: flows negate, so the
        // linear cost term and the bounds negate too
        let mut flipped = inst.clone();
        flipped.topology = topology;
        flipped.incidence = incidence;
        for sc in &mut flipped.edge_costs[0].stages {
            sc.lin = -sc.lin;
            let (lo, hi) = (-sc.q_max, -sc.q_min);
            sc.q_min = lo;
            sc.q_max = hi;
        }
        let v3 = exhaustive_solve(&flipped, &flipped.x0, &reference_grids(&flipped)).unwrap();
        assert!((v - v3).abs() < 1e-12, "flip: {v} vs {v3}");
    }

    #[test]
    fn coarser_control_grid_never_beats_finer() {
        let inst = two_node_instance();
        let fine = exhaustive_solve(&inst, &inst.x0, &reference_grids(&inst)).unwrap();
        let coarse_grids = OracleGrids::regular(&inst, 3, 3);
        let coarse = exhaustive_solve(&inst, &inst.x0, &coarse_grids).unwrap();
        assert!(coarse >= fine - 1e-12, "coarse {coarse} < fine {fine}");
    }

    #[test]
    fn size_guard_refuses_large_instances() {
        let inst = crate::instance::generate_family(3, 1).unwrap();
        let grids = OracleGrids::regular(&inst, 5, 5);
        match exhaustive_solve(&inst, &inst.x0, &grids) {
            Err(Error::OracleTooLarge { count, limit }) => {
                assert!(count > limit);
            }
            other => panic!("expected size-guard refusal, got {other:?}"),
        }
    }
}
