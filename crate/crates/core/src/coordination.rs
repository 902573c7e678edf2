//! Outer coordination loops: price decomposition (DADP, a lower bound
//! maximized by gradient ascent) and resource decomposition (PADP, an upper
//! bound minimized by projected gradient descent), plus the bound sandwich
//! report. Both loops share a limited-memory quasi-Newton direction with
//! accept-if-improve backtracking; Monte Carlo gradients use common random
//! numbers so the outer problem is deterministic given the seed.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edge::{solve_edge_price, solve_edge_resource};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::network::{project_onto_image, FlowVector};
use crate::nodal_dp::{evaluate, simulate_nodal, NodalSolver, StateGrid, TabularValueFunction};
use crate::uncertainty::sample_scenarios;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordinationOptions {
    /// Use the limited-memory quasi-Newton direction; plain gradient steps
    /// otherwise.
    pub quasi_newton: bool,
    pub initial_step: f64,
    /// Stop when the sup-norm of the coordination gradient is below this.
    pub grad_tol: f64,
    /// Stop when the relative bound change over the stall window is below
    /// this.
    pub value_tol: f64,
    pub stall_window: usize,
    pub max_iters: usize,
    /// Monte Carlo sample count for the DADP gradient.
    pub mc_samples: usize,
    pub seed: u64,
    pub state_points: usize,
    pub control_points: usize,
    /// Finite-difference step of the nodal resource gradient.
    pub fd_step: f64,
    pub lbfgs_memory: usize,
}

impl Default for CoordinationOptions {
    fn default() -> Self {
        Self {
            quasi_newton: true,
            initial_step: 1.0,
            grad_tol: 1e-3,
            value_tol: 1e-5,
            stall_window: 5,
            max_iters: 100,
            mc_samples: 1000,
            seed: 0,
            state_points: 51,
            control_points: 21,
            fd_step: 1e-2,
            lbfgs_memory: 10,
        }
    }
}

impl CoordinationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0 && self.value_tol > 0.0 && self.initial_step > 0.0) {
            return Err(Error::InvalidParameter(
                "coordination tolerances and initial step must be > 0".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("iteration cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub bound: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub wall_time: f64,
}

/// Result of one coordination run. The trace lists accepted iterates only,
/// so its bound column is monotone (nondecreasing for DADP, nonincreasing
/// for PADP).
#[derive(Debug, Clone)]
pub struct CoordinationResult {
    /// Final coordination vector (prices for DADP, resources for PADP),
    /// stages x nodes.
    pub coordination: FlowVector,
    pub bound: f64,
    pub trace: Vec<TraceRow>,
    /// Per-node value function stacks at the returned vector.
    pub node_values: Vec<Vec<TabularValueFunction>>,
    /// Edge multipliers at the optimum (PADP only).
    pub xi: Option<FlowVector>,
    /// Nodal resource gradients at the optimum (PADP only).
    pub mu: Option<FlowVector>,
    pub iterations: usize,
}

pub fn write_trace_csv(path: &std::path::Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "bound", "grad_norm", "step", "wall_time"])?;
    for row in trace {
        w.write_record([
            row.iteration.to_string(),
            format!("{:.17e}", row.bound),
            format!("{:.17e}", row.grad_norm),
            format!("{:.17e}", row.step),
            format!("{:.6}", row.wall_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn norm_inf(v: &FlowVector) -> f64 {
    v.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

/// Two-loop recursion over stored (s, y) pairs; returns `H g` as an
/// approximation of the Newton direction for the function whose gradient is
/// `g`. Pairs with non-positive curvature are skipped at storage time.
struct LbfgsMemory {
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
    capacity: usize,
}

impl LbfgsMemory {
    fn new(capacity: usize) -> Self {
        Self {
            pairs: Vec::new(),
            capacity,
        }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if self.pairs.len() == self.capacity {
                self.pairs.remove(0);
            }
            self.pairs.push((s, y));
        }
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let m = self.pairs.len();
        let mut alphas = vec![0.0; m];
        for k in (0..m).rev() {
            let (s, y) = &self.pairs[k];
            let rho = 1.0 / s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            let alpha = rho * s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            alphas[k] = alpha;
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= alpha * yi;
            }
        }
        if let Some((s, y)) = self.pairs.last() {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            let gamma = sy / yy;
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for k in 0..m {
            let (s, y) = &self.pairs[k];
            let rho = 1.0 / s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            let beta = rho * y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (alphas[k] - beta) * si;
            }
        }
        q
    }
}

struct NodeContext<'a> {
    solver: NodalSolver<'a>,
    x0: &'a [f64],
    noises: Vec<crate::uncertainty::FiniteDistribution>,
}

fn build_node_contexts<'a>(
    instance: &'a Instance,
    x0: &'a [Vec<f64>],
    opts: &CoordinationOptions,
) -> Result<Vec<NodeContext<'a>>> {
    instance
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let grid = StateGrid::for_node(node, opts.state_points)?;
            let noises = (0..instance.horizon)
                .map(|t| instance.noise.stages[t][i].clone())
                .collect();
            Ok(NodeContext {
                solver: NodalSolver::new(node, grid, opts.control_points),
                x0: &x0[i],
                noises,
            })
        })
        .collect()
}

// --- DADP -------------------------------------------------------------------

struct DadpEvaluation {
    bound: f64,
    node_tables: Vec<Vec<TabularValueFunction>>,
    edge_flows: FlowVector,
}

fn dadp_evaluate(
    instance: &Instance,
    contexts: &[NodeContext],
    prices: &FlowVector,
) -> Result<DadpEvaluation> {
    let node_results: Vec<Result<(f64, Vec<TabularValueFunction>)>> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| {
            let p_i = prices.column(i);
            let tables = ctx.solver.solve_price(&ctx.noises, &p_i);
            let v = evaluate(&tables[0], ctx.x0);
            if !v.is_finite() {
                return Err(Error::NodalInfeasible { node: i });
            }
            Ok((v, tables))
        })
        .collect();
    let mut bound = 0.0;
    let mut node_tables = Vec::with_capacity(contexts.len());
    for r in node_results {
        let (v, tables) = r?;
        bound += v;
        node_tables.push(tables);
    }
    let (edge_value, edge_flows) = if instance.num_edges() == 0 {
        (0.0, FlowVector::zeros(instance.horizon, 0))
    } else {
        let sol = solve_edge_price(&instance.edge_costs, &instance.incidence, prices)?;
        (sol.value, sol.flows)
    };
    bound += edge_value;
    Ok(DadpEvaluation {
        bound,
        node_tables,
        edge_flows,
    })
}

/// Monte Carlo estimate of the dual gradient `E[A Q + f]` under common
/// random numbers. The edge part is deterministic.
fn dadp_gradient(
    instance: &Instance,
    contexts: &[NodeContext],
    prices: &FlowVector,
    eval: &DadpEvaluation,
    opts: &CoordinationOptions,
) -> FlowVector {
    let scenarios = sample_scenarios(&instance.noise, opts.mc_samples, opts.seed);
    let n = instance.num_nodes();
    let horizon = instance.horizon;
    let mean_flows: Vec<Vec<f64>> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| {
            let p_i = prices.column(i);
            let sim = simulate_nodal(
                &ctx.solver,
                &eval.node_tables[i],
                &p_i,
                &scenarios,
                i,
                ctx.x0,
            );
            sim.mean_flow
        })
        .collect();
    let mut g = FlowVector::zeros(horizon, n);
    for t in 0..horizon {
        let aq = instance.incidence.apply(eval.edge_flows.stage(t));
        for i in 0..n {
            *g.at_mut(t, i) = aq[i] + mean_flows[i][t];
        }
    }
    g
}

/// Price-decomposition lower bound: maximizes `p -> LB(p)` and returns the
/// best evaluated iterate.
pub fn dadp_run(
    instance: &Instance,
    x0: &[Vec<f64>],
    opts: &CoordinationOptions,
) -> Result<CoordinationResult> {
    opts.validate()?;
    instance.validate()?;
    let contexts = build_node_contexts(instance, x0, opts)?;
    let n = instance.num_nodes();
    let start = Instant::now();

    let mut p = FlowVector::zeros(instance.horizon, n);
    let mut eval = dadp_evaluate(instance, &contexts, &p)?;
    let mut grad = dadp_gradient(instance, &contexts, &p, &eval, opts);
    let mut memory = LbfgsMemory::new(opts.lbfgs_memory);
    let mut trace = vec![TraceRow {
        iteration: 0,
        bound: eval.bound,
        grad_norm: norm_inf(&grad),
        step: 0.0,
        wall_time: start.elapsed().as_secs_f64(),
    }];

    let mut iterations = 0;
    for iter in 1..=opts.max_iters {
        if norm_inf(&grad) <= opts.grad_tol {
            break;
        }
        // ascent: try the quasi-Newton direction first, then the raw
        // gradient; accept the first improving step
        let mut directions: Vec<Vec<f64>> = Vec::new();
        if opts.quasi_newton {
            let d = memory.direction(&grad.values);
            let dg: f64 = d.iter().zip(&grad.values).map(|(a, b)| a * b).sum();
            if dg > 0.0 {
                directions.push(d);
            }
        }
        directions.push(grad.values.clone());

        let mut accepted = None;
        'search: for d in &directions {
            let mut step = opts.initial_step;
            for _ in 0..30 {
                let values: Vec<f64> = p
                    .values
                    .iter()
                    .zip(d)
                    .map(|(pi, di)| pi + step * di)
                    .collect();
                let candidate = FlowVector::from_values(instance.horizon, n, values)?;
                let cand_eval = dadp_evaluate(instance, &contexts, &candidate)?;
                if cand_eval.bound > eval.bound {
                    accepted = Some((candidate, cand_eval, step));
                    break 'search;
                }
                step *= 0.5;
            }
        }
        let Some((new_p, new_eval, step)) = accepted else {
            break; // no ascent direction found
        };
        let new_grad = dadp_gradient(instance, &contexts, &new_p, &new_eval, opts);
        let s: Vec<f64> = new_p
            .values
            .iter()
            .zip(&p.values)
            .map(|(a, b)| a - b)
            .collect();
        // maximization: curvature pair for the negated objective
        let y: Vec<f64> = grad
            .values
            .iter()
            .zip(&new_grad.values)
            .map(|(old, new)| old - new)
            .collect();
        memory.push(s, y);
        p = new_p;
        eval = new_eval;
        grad = new_grad;
        iterations = iter;
        trace.push(TraceRow {
            iteration: iter,
            bound: eval.bound,
            grad_norm: norm_inf(&grad),
            step,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if stalled(&trace, opts) {
            break;
        }
    }

    Ok(CoordinationResult {
        coordination: p,
        bound: eval.bound,
        node_values: eval.node_tables,
        trace,
        xi: None,
        mu: None,
        iterations,
    })
}

fn stalled(trace: &[TraceRow], opts: &CoordinationOptions) -> bool {
    if trace.len() <= opts.stall_window {
        return false;
    }
    let last = trace.last().unwrap().bound;
    let old = trace[trace.len() - 1 - opts.stall_window].bound;
    (last - old).abs() <= opts.value_tol * last.abs().max(1.0)
}

// --- PADP -------------------------------------------------------------------

struct PadpEvaluation {
    bound: f64,
    node_tables: Vec<Vec<TabularValueFunction>>,
    xi: FlowVector,
}

fn padp_evaluate(
    instance: &Instance,
    contexts: &[NodeContext],
    resources: &FlowVector,
) -> Result<PadpEvaluation> {
    let node_results: Vec<(f64, Vec<TabularValueFunction>)> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| {
            let r_i = resources.column(i);
            let tables = ctx.solver.solve_resource(&ctx.noises, &r_i);
            let v = evaluate(&tables[0], ctx.x0);
            (v, tables)
        })
        .collect();
    let mut bound = 0.0;
    let mut node_tables = Vec::with_capacity(contexts.len());
    for (v, tables) in node_results {
        bound += v; // may be +inf; the caller backtracks on it
        node_tables.push(tables);
    }
    let (edge_value, xi) = if instance.num_edges() == 0 {
        (0.0, FlowVector::zeros(instance.horizon, instance.num_nodes()))
    } else {
        match solve_edge_resource(
            &instance.edge_costs,
            &instance.topology,
            &instance.incidence,
            resources,
        ) {
            Ok(sol) => (sol.value, sol.multipliers),
            // a trial resource outside the edge capacities scores +inf and
            // is handled by the step backtracking
            Err(Error::EdgeResourceInfeasible { .. }) => (
                f64::INFINITY,
                FlowVector::zeros(instance.horizon, instance.num_nodes()),
            ),
            Err(other) => return Err(other),
        }
    };
    bound += edge_value;
    Ok(PadpEvaluation {
        bound,
        node_tables,
        xi,
    })
}

fn padp_mu(
    instance: &Instance,
    contexts: &[NodeContext],
    resources: &FlowVector,
    opts: &CoordinationOptions,
) -> Result<FlowVector> {
    let columns: Vec<Result<Vec<f64>>> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| {
            let r_i = resources.column(i);
            ctx.solver
                .resource_gradient(&ctx.noises, &r_i, ctx.x0, opts.fd_step)
                .map_err(|e| match e {
                    Error::NodalInfeasible { .. } => Error::NodalInfeasible { node: i },
                    other => other,
                })
        })
        .collect();
    let mut mu = FlowVector::zeros(instance.horizon, instance.num_nodes());
    for (i, col) in columns.into_iter().enumerate() {
        let col = col?;
        for (t, v) in col.into_iter().enumerate() {
            *mu.at_mut(t, i) = v;
        }
    }
    Ok(mu)
}

/// Resource-decomposition upper bound: minimizes `r -> UB(r)` over
/// `r in im(A)` by projected descent, starting from `r = 0`. Returns the
/// best evaluated iterate; the bound is `+inf` when no feasible resource was
/// found.
pub fn padp_run(
    instance: &Instance,
    x0: &[Vec<f64>],
    opts: &CoordinationOptions,
) -> Result<CoordinationResult> {
    opts.validate()?;
    instance.validate()?;
    let contexts = build_node_contexts(instance, x0, opts)?;
    let n = instance.num_nodes();
    let start = Instant::now();

    let mut r = FlowVector::zeros(instance.horizon, n);
    let mut eval = padp_evaluate(instance, &contexts, &r)?;
    if !eval.bound.is_finite() {
        // r = 0 (autarky) infeasible on the grid: report +inf
        return Ok(CoordinationResult {
            coordination: r,
            bound: f64::INFINITY,
            node_values: eval.node_tables,
            trace: vec![TraceRow {
                iteration: 0,
                bound: f64::INFINITY,
                grad_norm: f64::NAN,
                step: 0.0,
                wall_time: start.elapsed().as_secs_f64(),
            }],
            xi: Some(eval.xi),
            mu: None,
            iterations: 0,
        });
    }
    let mut mu = padp_mu(instance, &contexts, &r, opts)?;
    let mut memory = LbfgsMemory::new(opts.lbfgs_memory);
    let grad_of = |mu: &FlowVector, xi: &FlowVector| -> Result<FlowVector> {
        let raw = FlowVector::from_values(
            mu.horizon,
            mu.width,
            mu.values.iter().zip(&xi.values).map(|(a, b)| a + b).collect(),
        )?;
        project_onto_image(&raw, &instance.topology)
    };
    let mut grad = grad_of(&mu, &eval.xi)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        bound: eval.bound,
        grad_norm: norm_inf(&grad),
        step: 0.0,
        wall_time: start.elapsed().as_secs_f64(),
    }];

    let mut iterations = 0;
    for iter in 1..=opts.max_iters {
        if norm_inf(&grad) <= opts.grad_tol {
            break;
        }
        let mut directions: Vec<Vec<f64>> = Vec::new();
        if opts.quasi_newton {
            let d = memory.direction(&grad.values);
            let dg: f64 = d.iter().zip(&grad.values).map(|(a, b)| a * b).sum();
            if dg > 0.0 {
                directions.push(d);
            }
        }
        directions.push(grad.values.clone());

        let mut accepted = None;
        'search: for d in &directions {
            let mut step = opts.initial_step;
            // up to 20 halvings; +inf bounds simply fail the improvement
            // test and backtrack
            for _ in 0..20 {
                let values: Vec<f64> = r
                    .values
                    .iter()
                    .zip(d)
                    .map(|(ri, di)| ri - step * di)
                    .collect();
                let candidate = project_onto_image(
                    &FlowVector::from_values(instance.horizon, n, values)?,
                    &instance.topology,
                )?;
                let cand_eval = padp_evaluate(instance, &contexts, &candidate)?;
                if cand_eval.bound < eval.bound {
                    accepted = Some((candidate, cand_eval, step));
                    break 'search;
                }
                step *= 0.5;
            }
        }
        let Some((new_r, new_eval, step)) = accepted else {
            break;
        };
        let new_mu = padp_mu(instance, &contexts, &new_r, opts)?;
        let new_grad = grad_of(&new_mu, &new_eval.xi)?;
        let s: Vec<f64> = new_r
            .values
            .iter()
            .zip(&r.values)
            .map(|(a, b)| a - b)
            .collect();
        let y: Vec<f64> = new_grad
            .values
            .iter()
            .zip(&grad.values)
            .map(|(new, old)| new - old)
            .collect();
        memory.push(s, y);
        r = new_r;
        eval = new_eval;
        mu = new_mu;
        grad = new_grad;
        iterations = iter;
        trace.push(TraceRow {
            iteration: iter,
            bound: eval.bound,
            grad_norm: norm_inf(&grad),
            step,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if stalled(&trace, opts) {
            break;
        }
    }

    Ok(CoordinationResult {
        coordination: r,
        bound: eval.bound,
        node_values: eval.node_tables,
        trace,
        xi: Some(eval.xi),
        mu: Some(mu),
        iterations,
    })
}

// --- report -----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    pub lower: f64,
    pub upper: f64,
    /// Relative gap `(upper - lower) / max(1, |lower|)`.
    pub gap: f64,
    /// False when the sandwich inequality is violated beyond tolerance,
    /// which indicates a solver bug.
    pub consistent: bool,
}

pub fn bounds_report(dadp: &CoordinationResult, padp: &CoordinationResult) -> BoundsReport {
    let lower = dadp.bound;
    let upper = padp.bound;
    let gap = (upper - lower) / lower.abs().max(1.0);
    BoundsReport {
        lower,
        upper,
        gap,
        consistent: lower <= upper + 1e-6,
    }
}
