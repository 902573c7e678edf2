//! Online policy synthesis from a value-function stack and Monte Carlo
//! policy evaluation.
//!
//! For SDDP stacks the one-step problem is exactly the SDDP stage program
//! and is reused verbatim. For decomposed (price/resource) stacks the
//! coupling at time `t` is restored by building, per node, a convex
//! piecewise-linear value-of-injection envelope on an injection grid, then
//! solving the resulting flow problem over `q` exactly; node flows are set
//! to `f = -A q`, so Kirchhoff holds by construction, and the controls are
//! re-realised on the exact control grid so every trajectory is admissible.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::nodal_dp::{NodalSolver, StateGrid, TabularValueFunction, MAX_STATE_DIM};
use crate::prosumer::NodeNoise;
use crate::qp::{QpBuilder, QpOutcome};
use crate::sddp::{concat_state, stage_solve, state_layout, CutPool};
use crate::uncertainty::sample_scenarios;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    SddpCuts,
    DadpSum,
    PadpSum,
}

/// A global value-function stack from any of the three solvers. For the
/// decomposed kinds the global value at `x` is the sum of per-node tabular
/// values plus a constant edge term; the constant does not affect any
/// argmin, so it is not stored.
pub enum GlobalValueStack {
    SddpCuts { pools: Vec<CutPool> },
    Decomposed {
        kind: StackKind,
        /// `node_tables[i][t]` for `t = 0..=horizon`.
        node_tables: Vec<Vec<TabularValueFunction>>,
    },
}

impl GlobalValueStack {
    pub fn kind(&self) -> StackKind {
        match self {
            GlobalValueStack::SddpCuts { .. } => StackKind::SddpCuts,
            GlobalValueStack::Decomposed { kind, .. } => *kind,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyOptions {
    /// Injection grid size for the decomposed one-step problem.
    pub injection_points: usize,
    /// Control grid size of the nodal re-realisation.
    pub control_points: usize,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        Self {
            injection_points: 41,
            control_points: 21,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyDecision {
    pub u_ne: Vec<f64>,
    pub u_t: Vec<f64>,
    pub u_b: Vec<f64>,
    /// Node injections; satisfies `A q + f = 0` exactly.
    pub flows: Vec<f64>,
    pub q: Vec<f64>,
    pub next_state: Vec<Vec<f64>>,
    pub stage_cost: f64,
}

/// Lower convex hull of the finite `(f, v)` samples, as segments
/// `(slope, intercept)` whose max is the envelope.
fn convex_envelope(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &(x, y) in points {
        hull.push((x, y));
        while hull.len() >= 3 {
            let (x1, y1) = hull[hull.len() - 3];
            let (x2, y2) = hull[hull.len() - 2];
            let (x3, y3) = hull[hull.len() - 1];
            // drop the middle point when it lies above the chord
            if (y2 - y1) * (x3 - x2) >= (y3 - y2) * (x2 - x1) {
                hull.remove(hull.len() - 2);
            } else {
                break;
            }
        }
    }
    hull.windows(2)
        .map(|w| {
            let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            (slope, w[0].1 - slope * w[0].0)
        })
        .collect()
}

/// One-step policy for decomposed stacks: injection envelopes per node, a
/// flow program over `q`, then exact nodal re-realisation.
#[allow(clippy::too_many_arguments)]
fn decomposed_step(
    instance: &Instance,
    t: usize,
    x: &[Vec<f64>],
    w: &[NodeNoise],
    node_tables: &[Vec<TabularValueFunction>],
    solvers: &[NodalSolver],
    opts: &PolicyOptions,
) -> Result<PolicyDecision> {
    let n = instance.num_nodes();
    let m = instance.num_edges();
    let fail = |reason: String| Error::StageSolveFailed { stage: t, reason };

    // per-node value-of-injection samples on the injection grid
    let mut envelopes: Vec<Vec<(f64, f64)>> = Vec::with_capacity(n);
    let mut domains: Vec<(f64, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        let node = &instance.nodes[i];
        let dt = instance.dt;
        let (ub_min, ub_max) = node
            .battery
            .as_ref()
            .map_or((0.0, 0.0), |b| (b.power_min, b.power_max));
        let f_lo = -w[i].electricity / dt - ub_max - node.tank.heat_power_max;
        let f_hi = node.import_max - w[i].electricity / dt - ub_min;
        let mut xs = [0.0; MAX_STATE_DIM];
        xs[..x[i].len()].copy_from_slice(&x[i]);
        let vnext = &node_tables[i][t + 1];
        let mut points = Vec::new();
        for j in 0..opts.injection_points {
            let f = f_lo + (f_hi - f_lo) * j as f64 / (opts.injection_points - 1) as f64;
            if let Some(d) = solvers[i].greedy_for_injection(t, &xs, &w[i], f, vnext) {
                points.push((f, d.objective));
            }
        }
        if points.is_empty() {
            return Err(fail(format!("node {i}: no feasible injection at state {:?}", x[i])));
        }
        domains.push((points.first().unwrap().0, points.last().unwrap().0));
        envelopes.push(convex_envelope(&points));
    }

    // flow program: variables q (edges) then s (node epigraphs); f = -A q
    let num_vars = m + n;
    let mut qp = QpBuilder::new(num_vars);
    for e in 0..m {
        let sc = &instance.edge_costs[e].stages[t];
        qp.add_quad(e, sc.quad);
        qp.add_lin(e, sc.lin);
        qp.add_bounds(e, sc.q_min, sc.q_max);
    }
    // - (A q)_i as coefficient list over q
    let inj_coeffs = |i: usize| -> Vec<(usize, f64)> {
        (0..m)
            .filter_map(|e| {
                let a = instance.incidence.entry(i, e);
                (a != 0.0).then_some((e, -a))
            })
            .collect()
    };
    for i in 0..n {
        let v_s = m + i;
        qp.add_lin(v_s, 1.0);
        let coeffs = inj_coeffs(i);
        for &(slope, intercept) in &envelopes[i] {
            // s_i >= intercept + slope * f_i
            let mut row: Vec<(usize, f64)> = coeffs
                .iter()
                .map(|&(e, c)| (e, slope * c))
                .collect();
            row.push((v_s, -1.0));
            qp.add_ineq(row, -intercept);
        }
        if envelopes[i].is_empty() {
            // single finite sample: pin the injection
            let mut row = coeffs.clone();
            let target = domains[i].0;
            if row.is_empty() {
                if target.abs() > 1e-9 {
                    return Err(fail(format!("node {i}: isolated node needs zero injection")));
                }
            } else {
                qp.add_eq(row.clone(), target);
            }
            row.clear();
        } else {
            // keep the injection inside the sampled domain
            let (lo, hi) = domains[i];
            let row_lo: Vec<(usize, f64)> = coeffs.iter().map(|&(e, c)| (e, -c)).collect();
            if !coeffs.is_empty() {
                qp.add_ineq(row_lo, -lo); // -f_i <= -lo
                qp.add_ineq(coeffs.clone(), hi); // f_i <= hi
            }
        }
    }
    let (outcome, solution) = qp.solve();
    let sol = match (outcome, solution) {
        (QpOutcome::Solved, Some(s)) => s,
        (outcome, _) => return Err(fail(format!("flow program not solved: {outcome:?}"))),
    };
    let q: Vec<f64> = (0..m).map(|e| sol.x[e]).collect();
    let aq = instance.incidence.apply(&q);
    let flows: Vec<f64> = aq.iter().map(|v| -v).collect();

    // exact nodal re-realisation at the realised injections
    let mut u_ne = Vec::with_capacity(n);
    let mut u_t = Vec::with_capacity(n);
    let mut u_b = Vec::with_capacity(n);
    let mut next_state = Vec::with_capacity(n);
    let mut stage_cost = 0.0;
    for i in 0..n {
        let mut xs = [0.0; MAX_STATE_DIM];
        xs[..x[i].len()].copy_from_slice(&x[i]);
        let vnext = &node_tables[i][t + 1];
        let d = solvers[i]
            .greedy_for_injection(t, &xs, &w[i], flows[i], vnext)
            .ok_or_else(|| {
                fail(format!("node {i}: injection {} infeasible at state {:?}", flows[i], x[i]))
            })?;
        u_ne.push(d.u_ne);
        u_t.push(d.u_t);
        u_b.push(d.u_b);
        next_state.push(d.next_state[..x[i].len()].to_vec());
        stage_cost += d.stage_cost;
    }
    for e in 0..m {
        stage_cost += instance.edge_costs[e].stages[t].cost(q[e]);
    }
    Ok(PolicyDecision {
        u_ne,
        u_t,
        u_b,
        flows,
        q,
        next_state,
        stage_cost,
    })
}

/// Minimizer of the one-step problem: stage costs plus the stack's
/// next-stage value, subject to dynamics, balance, and Kirchhoff. The
/// returned flows satisfy `A q + f = 0` exactly.
pub fn one_step_policy(
    instance: &Instance,
    t: usize,
    x: &[Vec<f64>],
    w: &[NodeNoise],
    stack: &GlobalValueStack,
    solvers: &[NodalSolver],
    opts: &PolicyOptions,
) -> Result<PolicyDecision> {
    match stack {
        GlobalValueStack::SddpCuts { pools } => {
            let layout = state_layout(instance);
            let xg = concat_state(x);
            let mut wj = Vec::with_capacity(2 * w.len());
            for noise in w {
                wj.push(noise.hot_water);
                wj.push(noise.electricity);
            }
            let next_pool = if t + 1 == instance.horizon {
                None
            } else {
                Some(&pools[t + 1])
            };
            let sol = stage_solve(instance, t, &xg, &wj, next_pool, &layout)?;
            let mut next_state = Vec::with_capacity(instance.num_nodes());
            let mut k = 0;
            for node in &instance.nodes {
                let d = node.state_dim();
                next_state.push(sol.x_out[k..k + d].to_vec());
                k += d;
            }
            Ok(PolicyDecision {
                u_ne: sol.u_ne,
                u_t: sol.u_t,
                u_b: sol.u_b,
                flows: sol.flows,
                q: sol.q,
                next_state,
                stage_cost: sol.stage_cost,
            })
        }
        GlobalValueStack::Decomposed { node_tables, .. } => {
            decomposed_step(instance, t, x, w, node_tables, solvers, opts)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub mean: f64,
    pub half_width: f64,
    pub costs: Vec<f64>,
    pub flagged: usize,
}

pub fn write_simulation_csv(path: &std::path::Path, report: &SimulationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "cost"])?;
    for (i, c) in report.costs.iter().enumerate() {
        w.write_record([i.to_string(), format!("{c:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Rolls the one-step policy on `n` scenarios of the original noise law.
/// Failed scenarios are flagged, excluded from the statistics, and counted.
pub fn simulate_policy(
    instance: &Instance,
    x0: &[Vec<f64>],
    stack: &GlobalValueStack,
    n: usize,
    seed: u64,
    opts: &PolicyOptions,
) -> Result<SimulationReport> {
    instance.validate()?;
    let scenarios = sample_scenarios(&instance.noise, n, seed);
    let solvers: Vec<NodalSolver> = instance
        .nodes
        .iter()
        .map(|node| {
            Ok(NodalSolver::new(
                node,
                StateGrid::for_node(node, 2)?,
                opts.control_points,
            ))
        })
        .collect::<Result<_>>()?;
    let results: Vec<Option<f64>> = scenarios
        .par_iter()
        .map(|sc| {
            let mut x = x0.to_vec();
            let mut total = 0.0;
            for t in 0..instance.horizon {
                let decision =
                    one_step_policy(instance, t, &x, &sc.draws[t], stack, &solvers, opts).ok()?;
                total += decision.stage_cost;
                x = decision.next_state;
            }
            for (node, xs) in instance.nodes.iter().zip(&x) {
                total += crate::prosumer::terminal_cost(&node.tank, xs);
            }
            Some(total)
        })
        .collect();
    let costs: Vec<f64> = results.iter().filter_map(|r| *r).collect();
    let flagged = results.len() - costs.len();
    if costs.is_empty() {
        return Err(Error::PolicyInfeasible {
            stage: 0,
            reason: "every simulated scenario failed".into(),
        });
    }
    let k = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / k;
    let var = if costs.len() > 1 {
        costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Ok(SimulationReport {
        mean,
        half_width: 1.96 * var.sqrt() / k.sqrt(),
        costs,
        flagged,
    })
}
