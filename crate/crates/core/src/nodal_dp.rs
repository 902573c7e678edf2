//! Per-node hazard-decision dynamic programming on a tensor-product state
//! grid, for the price subproblem and the resource subproblem, plus the
//! greedy nodal policy used by the coordination gradients.
//!
//! The recursion is
//! `V_t(x) = E_w [ min_u  L_t(x,u,w) + <p_t, f> + V_{t+1}(g_t(x,u,w)) ]`
//! with the expectation outside the min (the control is chosen after the
//! noise is observed). Controls leaving the state bounds score `+inf`;
//! `+inf` propagates saturatingly through interpolation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prosumer::{battery_step, node_balance, stage_cost, tank_step, terminal_cost, NodeModel, NodeNoise};
use crate::uncertainty::{FiniteDistribution, Scenario};

/// States have at most two components: `[battery, tank]` or `[tank]`.
pub const MAX_STATE_DIM: usize = 2;

pub type State = [f64; MAX_STATE_DIM];

const BOUNDS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDim {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridDim {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }
}

/// Tensor-product grid over the node state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub dims: Vec<GridDim>,
}

impl StateGrid {
    pub fn new(dims: Vec<GridDim>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_STATE_DIM {
            return Err(Error::InvalidParameter(format!(
                "state grid must have 1..={MAX_STATE_DIM} dimensions"
            )));
        }
        for d in &dims {
            if d.points < 2 || !(d.lo < d.hi) {
                return Err(Error::InvalidParameter(
                    "each grid dimension needs >= 2 points and lo < hi".into(),
                ));
            }
        }
        Ok(Self { dims })
    }

    /// Grid matching the node's device capacity bounds.
    pub fn for_node(node: &NodeModel, points: usize) -> Result<Self> {
        let mut dims = Vec::new();
        if let Some(b) = &node.battery {
            dims.push(GridDim {
                lo: b.level_min,
                hi: b.level_max,
                points,
            });
        }
        dims.push(GridDim {
            lo: node.tank.level_min,
            hi: node.tank.level_max,
            points,
        });
        Self::new(dims)
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn num_points(&self) -> usize {
        self.dims.iter().map(|d| d.points).product()
    }

    /// Coordinates of the flat-indexed grid point (trailing components 0).
    pub fn point(&self, flat: usize) -> State {
        let mut out = [0.0; MAX_STATE_DIM];
        let mut rem = flat;
        for (k, d) in self.dims.iter().enumerate().rev() {
            let i = rem % d.points;
            rem /= d.points;
            out[k] = d.lo + d.step() * i as f64;
        }
        out
    }
}

/// Tabular value function: values over the grid points, row-major with the
/// last dimension fastest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularValueFunction {
    pub grid: StateGrid,
    pub values: Vec<f64>,
    pub stage: usize,
}

/// Multilinear interpolation with clamping outside the grid. Any `+inf`
/// corner of the containing cell makes the result `+inf`.
pub fn evaluate(vf: &TabularValueFunction, x: &[f64]) -> f64 {
    let nd = vf.grid.ndim();
    let mut base = [0usize; MAX_STATE_DIM];
    let mut frac = [0.0f64; MAX_STATE_DIM];
    for k in 0..nd {
        let d = &vf.grid.dims[k];
        let xv = x[k].clamp(d.lo, d.hi);
        let pos = (xv - d.lo) / d.step();
        let mut i = pos.floor() as usize;
        if i >= d.points - 1 {
            i = d.points - 2;
        }
        base[k] = i;
        frac[k] = pos - i as f64;
    }
    let mut strides = [1usize; MAX_STATE_DIM];
    for k in (0..nd.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * vf.grid.dims[k + 1].points;
    }
    let corners = 1usize << nd;
    // saturating: if any corner of the cell is infinite, the cell is
    let mut acc = 0.0;
    let mut any_inf = false;
    for c in 0..corners {
        let mut idx = 0usize;
        let mut w = 1.0;
        for k in 0..nd {
            let hi = (c >> k) & 1 == 1;
            idx += (base[k] + hi as usize) * strides[k];
            w *= if hi { frac[k] } else { 1.0 - frac[k] };
        }
        let v = vf.values[idx];
        if v.is_infinite() {
            any_inf = true;
        } else {
            acc += w * v;
        }
    }
    if any_inf {
        f64::INFINITY
    } else {
        acc
    }
}

/// Greedy decision at one stage, one state, one realised noise.
#[derive(Debug, Clone, Copy)]
pub struct Decision {
    pub u_b: f64,
    pub u_t: f64,
    pub u_ne: f64,
    /// Injection into the network (power).
    pub flow: f64,
    pub next_state: State,
    /// Import cost of the step (price term excluded).
    pub stage_cost: f64,
    /// Full inner objective, including the coordination term and the
    /// interpolated next value.
    pub objective: f64,
}

/// DP engine for one node: shared control grids and state grid.
pub struct NodalSolver<'a> {
    pub node: &'a NodeModel,
    pub grid: StateGrid,
    u_b_grid: Vec<f64>,
    u_t_grid: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || lo == hi {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl<'a> NodalSolver<'a> {
    pub fn new(node: &'a NodeModel, grid: StateGrid, control_points: usize) -> Self {
        let u_b_grid = match &node.battery {
            Some(b) => linspace(b.power_min, b.power_max, control_points),
            None => vec![0.0],
        };
        let u_t_grid = linspace(0.0, node.tank.heat_power_max, control_points);
        Self {
            node,
            grid,
            u_b_grid,
            u_t_grid,
        }
    }

    /// Next state under `(u_b, u_t)`; `None` when it leaves the bounds.
    fn next_state(&self, x: &State, u_b: f64, u_t: f64, w: &NodeNoise) -> Option<State> {
        let dt = self.node.dt;
        let mut next = [0.0; MAX_STATE_DIM];
        let mut k = 0;
        if let Some(b) = &self.node.battery {
            let nb = battery_step(b, x[0], u_b, dt);
            if nb < b.level_min - BOUNDS_EPS || nb > b.level_max + BOUNDS_EPS {
                return None;
            }
            next[0] = nb;
            k = 1;
        }
        let t = &self.node.tank;
        let nh = tank_step(t, x[k], u_t, w.hot_water, dt);
        if nh < t.level_min - BOUNDS_EPS || nh > t.level_max + BOUNDS_EPS {
            return None;
        }
        next[k] = nh;
        Some(next)
    }

    /// Inner problem of the price recursion. The objective is affine in
    /// `u_ne` over `[0, import_max]`, so `u_ne` is optimized in closed form
    /// given `(u_b, u_t)`.
    pub fn greedy_price(
        &self,
        t: usize,
        x: &State,
        w: &NodeNoise,
        price_t: f64,
        vnext: &TabularValueFunction,
    ) -> Option<Decision> {
        let dt = self.node.dt;
        let p_el = self.node.import_price[t];
        let une_coeff = p_el * dt + price_t;
        let u_ne = if une_coeff >= 0.0 { 0.0 } else { self.node.import_max };
        let mut best: Option<Decision> = None;
        for &u_b in &self.u_b_grid {
            for &u_t in &self.u_t_grid {
                let Some(next) = self.next_state(x, u_b, u_t, w) else {
                    continue;
                };
                let v = evaluate(vnext, &next[..self.grid.ndim()]);
                if v.is_infinite() {
                    continue;
                }
                let flow = node_balance(u_ne, w.electricity, u_b, u_t, dt);
                let cost = stage_cost(p_el, u_ne, dt);
                let obj = cost + price_t * flow + v;
                if best.as_ref().is_none_or(|b| obj < b.objective) {
                    best = Some(Decision {
                        u_b,
                        u_t,
                        u_ne,
                        flow,
                        next_state: next,
                        stage_cost: cost,
                        objective: obj,
                    });
                }
            }
        }
        best
    }

    /// Inner problem of the resource recursion: the balance is pinned to
    /// `f = r_t`, which eliminates `u_ne`.
    pub fn greedy_resource(
        &self,
        t: usize,
        x: &State,
        w: &NodeNoise,
        resource_t: f64,
        vnext: &TabularValueFunction,
    ) -> Option<Decision> {
        let dt = self.node.dt;
        let p_el = self.node.import_price[t];
        let mut best: Option<Decision> = None;
        for &u_b in &self.u_b_grid {
            for &u_t in &self.u_t_grid {
                let u_ne = resource_t + w.electricity / dt + u_b + u_t;
                if u_ne < -BOUNDS_EPS || u_ne > self.node.import_max + BOUNDS_EPS {
                    continue;
                }
                let u_ne = u_ne.clamp(0.0, self.node.import_max);
                let Some(next) = self.next_state(x, u_b, u_t, w) else {
                    continue;
                };
                let v = evaluate(vnext, &next[..self.grid.ndim()]);
                if v.is_infinite() {
                    continue;
                }
                let cost = stage_cost(p_el, u_ne, dt);
                let obj = cost + v;
                if best.as_ref().is_none_or(|b| obj < b.objective) {
                    best = Some(Decision {
                        u_b,
                        u_t,
                        u_ne,
                        flow: resource_t,
                        next_state: next,
                        stage_cost: cost,
                        objective: obj,
                    });
                }
            }
        }
        best
    }

    /// Value of realising the exact injection `f` at `(t, x, w)` against an
    /// arbitrary next-stage value table; used by the one-step policy.
    pub fn greedy_for_injection(
        &self,
        t: usize,
        x: &State,
        w: &NodeNoise,
        injection: f64,
        vnext: &TabularValueFunction,
    ) -> Option<Decision> {
        self.greedy_resource(t, x, w, injection, vnext)
    }

    fn terminal_table(&self, horizon: usize) -> TabularValueFunction {
        let values = (0..self.grid.num_points())
            .map(|i| {
                let x = self.grid.point(i);
                terminal_cost(&self.node.tank, &x[..self.grid.ndim()])
            })
            .collect();
        TabularValueFunction {
            grid: self.grid.clone(),
            values,
            stage: horizon,
        }
    }

    fn stage_table<F>(&self, t: usize, noise: &FiniteDistribution, inner: F) -> TabularValueFunction
    where
        F: Fn(usize, &State, &NodeNoise) -> Option<Decision> + Sync,
    {
        let values: Vec<f64> = (0..self.grid.num_points())
            .into_par_iter()
            .map(|i| {
                let x = self.grid.point(i);
                let mut acc = 0.0;
                for (a, &prob) in noise.atoms().iter().zip(noise.probabilities()) {
                    if prob == 0.0 {
                        continue;
                    }
                    let w = NodeNoise {
                        hot_water: a[0],
                        electricity: a[1],
                    };
                    match inner(t, &x, &w) {
                        Some(d) => acc += prob * d.objective,
                        None => return f64::INFINITY,
                    }
                }
                acc
            })
            .collect();
        TabularValueFunction {
            grid: self.grid.clone(),
            values,
            stage: t,
        }
    }

    /// Local price value functions for `t = 0..=T`.
    pub fn solve_price(
        &self,
        noises: &[FiniteDistribution],
        prices: &[f64],
    ) -> Vec<TabularValueFunction> {
        let horizon = noises.len();
        let mut tables = vec![self.terminal_table(horizon)];
        for t in (0..horizon).rev() {
            let vnext = &tables[tables.len() - 1];
            let table = self.stage_table(t, &noises[t], |t, x, w| {
                self.greedy_price(t, x, w, prices[t], vnext)
            });
            tables.push(table);
        }
        tables.reverse();
        tables
    }

    /// Local resource value functions for `t = 0..=T`. Entries where no
    /// control realises the pinned balance are `+inf`; relatively complete
    /// recourse is not assumed.
    pub fn solve_resource(
        &self,
        noises: &[FiniteDistribution],
        resources: &[f64],
    ) -> Vec<TabularValueFunction> {
        let horizon = noises.len();
        let mut tables = vec![self.terminal_table(horizon)];
        for t in (0..horizon).rev() {
            let vnext = &tables[tables.len() - 1];
            let table = self.stage_table(t, &noises[t], |t, x, w| {
                self.greedy_resource(t, x, w, resources[t], vnext)
            });
            tables.push(table);
        }
        tables.reverse();
        tables
    }

    /// Resource value at `x0` re-using the unperturbed tail: only stages
    /// `0..=from_stage` are recomputed against `tail[from_stage + 1]`.
    fn resource_value_with_tail(
        &self,
        noises: &[FiniteDistribution],
        resources: &[f64],
        tail: &[TabularValueFunction],
        from_stage: usize,
        x0: &[f64],
    ) -> f64 {
        let mut current = tail[from_stage + 1].clone();
        for t in (0..=from_stage).rev() {
            current = self.stage_table(t, &noises[t], |t, x, w| {
                self.greedy_resource(t, x, w, resources[t], &current)
            });
        }
        evaluate(&current, x0)
    }

    /// Gradient of `r -> V_resource[r](x0)` by central finite differences,
    /// one coordinate per stage. Falls back to one-sided differences at the
    /// boundary of the feasible resource domain.
    pub fn resource_gradient(
        &self,
        noises: &[FiniteDistribution],
        resources: &[f64],
        x0: &[f64],
        h: f64,
    ) -> Result<Vec<f64>> {
        let horizon = noises.len();
        let tables = self.solve_resource(noises, resources);
        let v0 = evaluate(&tables[0], x0);
        if v0.is_infinite() {
            return Err(Error::NodalInfeasible { node: 0 });
        }
        let grads: Vec<Result<f64>> = (0..horizon)
            .into_par_iter()
            .map(|t| {
                let mut rp = resources.to_vec();
                rp[t] += h;
                let vp = self.resource_value_with_tail(noises, &rp, &tables, t, x0);
                let mut rm = resources.to_vec();
                rm[t] -= h;
                let vm = self.resource_value_with_tail(noises, &rm, &tables, t, x0);
                match (vp.is_finite(), vm.is_finite()) {
                    (true, true) => Ok((vp - vm) / (2.0 * h)),
                    (true, false) => Ok((vp - v0) / h),
                    (false, true) => Ok((v0 - vm) / h),
                    (false, false) => Err(Error::GradientUndefined { stage: t }),
                }
            })
            .collect();
        grads.into_iter().collect()
    }
}

/// Per-scenario flow trajectories of the greedy price policy, and their
/// empirical mean. Scenarios hitting an infeasible state are flagged and
/// excluded from the mean.
#[derive(Debug, Clone)]
pub struct NodalSimulation {
    pub flows: Vec<Vec<f64>>,
    pub mean_flow: Vec<f64>,
    pub flagged: usize,
}

pub fn simulate_nodal(
    solver: &NodalSolver,
    tables: &[TabularValueFunction],
    prices: &[f64],
    scenarios: &[Scenario],
    node_index: usize,
    x0: &[f64],
) -> NodalSimulation {
    let horizon = prices.len();
    let results: Vec<Option<Vec<f64>>> = scenarios
        .par_iter()
        .map(|sc| {
            let mut x = [0.0; MAX_STATE_DIM];
            x[..x0.len()].copy_from_slice(x0);
            let mut flows = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let w = sc.draws[t][node_index];
                let d = solver.greedy_price(t, &x, &w, prices[t], &tables[t + 1])?;
                flows.push(d.flow);
                x = d.next_state;
            }
            Some(flows)
        })
        .collect();
    let mut mean = vec![0.0; horizon];
    let mut flagged = 0;
    let mut kept = 0usize;
    let mut flows_out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Some(f) => {
                for (m, v) in mean.iter_mut().zip(&f) {
                    *m += v;
                }
                kept += 1;
                flows_out.push(f);
            }
            None => {
                flagged += 1;
                flows_out.push(Vec::new());
            }
        }
    }
    if kept > 0 {
        for m in &mut mean {
            *m /= kept as f64;
        }
    }
    NodalSimulation {
        flows: flows_out,
        mean_flow: mean,
        flagged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prosumer::TankParams;
    use crate::uncertainty::NoiseModel;

    fn tank_only_node(horizon: usize, p_el: f64, import_max: f64) -> NodeModel {
        NodeModel {
            battery: None,
            tank: TankParams {
                conduction_loss: 1.0,
                conversion: 1.0,
                level_min: 0.0,
                level_max: 10.0,
                heat_power_max: 0.0,
                level_ref: 0.0,
                penalty_rate: 0.0,
            },
            import_max,
            dt: 0.25,
            import_price: vec![p_el; horizon],
        }
    }

    fn dirac_noise(horizon: usize, d_hw: f64, d_el: f64) -> Vec<FiniteDistribution> {
        vec![FiniteDistribution::dirac(vec![d_hw, d_el]); horizon]
    }

    #[test]
    fn evaluate_interpolation() {
        let grid = StateGrid::new(vec![GridDim { lo: 0.0, hi: 1.0, points: 2 }]).unwrap();
        let vf = TabularValueFunction {
            grid,
            values: vec![0.0, 10.0],
            stage: 0,
        };
        assert_eq!(evaluate(&vf, &[0.5]), 5.0);
        assert_eq!(evaluate(&vf, &[1.0]), 10.0);
        assert_eq!(evaluate(&vf, &[0.0]), 0.0);
        assert_eq!(evaluate(&vf, &[1.2]), 10.0); // clamped
    }

    #[test]
    fn evaluate_saturates_on_infinite_corner() {
        let grid = StateGrid::new(vec![GridDim { lo: 0.0, hi: 3.0, points: 4 }]).unwrap();
        let vf = TabularValueFunction {
            grid,
            values: vec![0.0, f64::INFINITY, 4.0, 8.0],
            stage: 0,
        };
        // both cells touching the infinite corner are infinite, even at the
        // finite corner itself
        assert!(evaluate(&vf, &[0.5]).is_infinite());
        assert!(evaluate(&vf, &[0.0]).is_infinite());
        assert!(evaluate(&vf, &[1.5]).is_infinite());
        assert_eq!(evaluate(&vf, &[2.5]), 6.0);
    }

    // T=1 linear-minimisation examples: tank inert, demand d_el/dt = 1 kW,
    // u_ne in [0, 5].
    fn one_stage_setup() -> (NodeModel, Vec<FiniteDistribution>) {
        let node = tank_only_node(1, 1.0, 5.0);
        let noises = dirac_noise(1, 0.0, 0.25); // d_el = 0.25 kWh -> 1 kW
        (node, noises)
    }

    #[test]
    fn price_dp_one_stage_examples() {
        let (node, noises) = one_stage_setup();
        let grid = StateGrid::for_node(&node, 2).unwrap();
        let solver = NodalSolver::new(&node, grid, 2);

        // p = 0: u_ne = 0, V_0 = 0
        let tables = solver.solve_price(&noises, &[0.0]);
        assert!((evaluate(&tables[0], &[5.0]) - 0.0).abs() < 1e-12);

        // p = 2*dt: coefficient (1 + 2)*dt > 0 -> u_ne = 0, V_0 = -2 dt
        let p = 2.0 * 0.25;
        let tables = solver.solve_price(&noises, &[p]);
        assert!((evaluate(&tables[0], &[5.0]) - (-0.5)).abs() < 1e-12);

        // p = -2*dt: coefficient (1 - 2)*dt < 0 -> u_ne = 5, V_0 = -3 dt
        let p = -2.0 * 0.25;
        let tables = solver.solve_price(&noises, &[p]);
        assert!((evaluate(&tables[0], &[5.0]) - (-0.75)).abs() < 1e-12);
    }

    #[test]
    fn resource_dp_autarkic_nonnegative_and_infeasible() {
        let (node, noises) = one_stage_setup();
        let grid = StateGrid::for_node(&node, 2).unwrap();
        let solver = NodalSolver::new(&node, grid, 2);

        // r = 0: autarkic; u_ne = 1 kW, cost 0.25
        let tables = solver.solve_resource(&noises, &[0.0]);
        assert!((evaluate(&tables[0], &[5.0]) - 0.25).abs() < 1e-12);

        // r very negative: forced export beyond u_ne elimination -> +inf
        let tables = solver.solve_resource(&noises, &[-100.0]);
        assert!(evaluate(&tables[0], &[5.0]).is_infinite());
    }

    #[test]
    fn terminal_table_matches_terminal_cost_exactly() {
        let mut node = tank_only_node(2, 1.0, 5.0);
        node.tank.level_ref = 4.0;
        node.tank.penalty_rate = 3.0;
        let grid = StateGrid::for_node(&node, 11).unwrap();
        let solver = NodalSolver::new(&node, grid.clone(), 3);
        let tables = solver.solve_price(&dirac_noise(2, 0.0, 0.0), &[0.0, 0.0]);
        for i in 0..grid.num_points() {
            let x = grid.point(i);
            assert_eq!(tables[2].values[i], terminal_cost(&node.tank, &x[..1]));
        }
    }

    #[test]
    fn hazard_decision_beats_decision_hazard() {
        // two atoms; the control can adapt to the observed demand, so the
        // expectation-outside-min value is <= the min-outside-expectation
        // (open-loop) value
        let node = tank_only_node(1, 1.0, 5.0);
        let noise = FiniteDistribution::new(
            vec![vec![0.0, 0.0], vec![0.0, 1.0]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let grid = StateGrid::for_node(&node, 2).unwrap();
        let solver = NodalSolver::new(&node, grid, 2);
        // resource r = 0: per-atom u_ne = d_el/dt -> mean cost
        let tables = solver.solve_resource(&[noise.clone()], &[0.0]);
        let hd = evaluate(&tables[0], &[5.0]);
        // open-loop: a single u_ne must cover the worst atom (u_ne >= 4 kW)
        let ol = (0..2)
            .map(|_| 1.0 * 4.0 * 0.25) // p_el * u_ne * dt with u_ne = 4
            .sum::<f64>()
            / 2.0;
        assert!(hd <= ol + 1e-12, "hd {hd} vs open-loop {ol}");
    }

    #[test]
    fn price_value_concave_in_price() {
        let mut node = tank_only_node(3, 1.0, 5.0);
        node.tank.heat_power_max = 2.0;
        node.tank.level_ref = 2.0;
        node.tank.penalty_rate = 4.0;
        let noises = dirac_noise(3, 0.3, 0.25);
        let grid = StateGrid::for_node(&node, 21).unwrap();
        let solver = NodalSolver::new(&node, grid, 5);
        let x0 = [1.0, 0.0];
        let p1 = [0.1, -0.2, 0.3];
        let p2 = [-0.3, 0.4, 0.0];
        let value = |p: &[f64]| evaluate(&solver.solve_price(&noises, p)[0], &x0[..1]);
        for lam in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let pm: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
            let lhs = value(&pm);
            let rhs = lam * value(&p1) + (1.0 - lam) * value(&p2);
            assert!(lhs >= rhs - 1e-9, "lambda {lam}: {lhs} < {rhs}");
        }
    }

    #[test]
    fn resource_gradient_quadratic_toy() {
        // Tank with free heating and quadratic-like response: easier to
        // construct directly -- a node where importing is forced and cost is
        // linear in r, so the gradient is the price itself. With p_el
        // constant and ample import, V[r](x0) = sum_t p_el * dt * (r_t + d/dt)
        // on the feasible region, so dV/dr_t = p_el * dt.
        let node = tank_only_node(3, 2.0, 50.0);
        let noises = dirac_noise(3, 0.0, 0.25);
        let grid = StateGrid::for_node(&node, 2).unwrap();
        let solver = NodalSolver::new(&node, grid, 2);
        let r = [1.0, 2.0, 0.5];
        let g = solver.resource_gradient(&noises, &r, &[5.0], 1e-2).unwrap();
        for gt in g {
            assert!((gt - 0.5).abs() < 1e-9, "gt = {gt}");
        }
    }

    #[test]
    fn simulate_nodal_deterministic_matches_dp_argmin() {
        let (node, noises) = one_stage_setup();
        let grid = StateGrid::for_node(&node, 2).unwrap();
        let solver = NodalSolver::new(&node, grid, 2);
        let p = [-2.0 * 0.25];
        let tables = solver.solve_price(&noises, &p);
        let model = NoiseModel {
            stages: vec![vec![FiniteDistribution::dirac(vec![0.0, 0.25])]],
        };
        let scenarios = crate::uncertainty::sample_scenarios(&model, 4, 9);
        let sim = simulate_nodal(&solver, &tables, &p, &scenarios, 0, &[5.0]);
        assert_eq!(sim.flagged, 0);
        // argmin u_ne = 5 -> flow = 5 - 1 = 4
        for f in &sim.flows {
            assert!((f[0] - 4.0).abs() < 1e-12);
        }
        assert!((sim.mean_flow[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn simulate_nodal_two_atom_mean() {
        // 2-atom noise, T=1: mean flow = probability-weighted atom-wise
        // argmin flows; with p = 0 and p_el > 0, u_ne = 0 and flow = -d/dt
        let node = tank_only_node(1, 1.0, 5.0);
        let noise =
            FiniteDistribution::new(vec![vec![0.0, 0.25], vec![0.0, 0.5]], vec![0.5, 0.5]).unwrap();
        let grid = StateGrid::for_node(&node, 2).unwrap();
        let solver = NodalSolver::new(&node, grid, 2);
        let tables = solver.solve_price(&[noise.clone()], &[0.0]);
        let model = NoiseModel {
            stages: vec![vec![noise]],
        };
        let scenarios = crate::uncertainty::sample_scenarios(&model, 4000, 17);
        let sim = simulate_nodal(&solver, &tables, &[0.0], &scenarios, 0, &[5.0]);
        // atom flows: -1 and -2, each with prob 1/2 -> mean -1.5
        assert!((sim.mean_flow[0] + 1.5).abs() < 0.05, "{}", sim.mean_flow[0]);
    }
}
