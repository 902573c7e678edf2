//! Global SDDP baseline: stage noise resampled by k-means, forward/backward
//! passes building affine under-estimators (cuts) of the global value
//! functions, a statistical upper bound from policy rollouts under the
//! original noise law, a 1% gap stopping rule, and level-one cut selection.
//!
//! The battery yield kink is modeled with split variables `u_b+ / u_b-`,
//! which is exact under nonnegative import prices (wasting round-trip energy
//! is then never profitable); instance prices are checked at run start. The
//! terminal cost is handled exactly at the last stage through per-node hinge
//! epigraph variables instead of terminal cuts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::qp::{QpBuilder, QpOutcome};
use crate::uncertainty::{resample_product, sample_scenarios, FiniteDistribution};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SddpOptions {
    /// Number of k-means atoms per stage.
    pub resample_k: usize,
    /// Monte Carlo sample count fed to the per-stage k-means.
    pub resample_samples: usize,
    pub max_iters: usize,
    /// Statistical upper bound cadence (iterations).
    pub ub_every: usize,
    pub ub_scenarios: usize,
    /// Relative gap stopping threshold.
    pub gap_tol: f64,
    /// Cut pool capacity per stage.
    pub cut_cap: usize,
    pub seed: u64,
}

impl Default for SddpOptions {
    fn default() -> Self {
        Self {
            resample_k: 100,
            resample_samples: 1000,
            max_iters: 2000,
            ub_every: 10,
            ub_scenarios: 1000,
            gap_tol: 0.01,
            cut_cap: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cut {
    pub intercept: f64,
    /// Slope over the concatenated global state.
    pub slope: Vec<f64>,
    pub stage: usize,
    pub iteration: usize,
}

impl Cut {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.intercept + self.slope.iter().zip(x).map(|(s, v)| s * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutPool {
    pub cuts: Vec<Cut>,
    pub visited: Vec<Vec<f64>>,
    pub cap: usize,
}

impl CutPool {
    pub fn new(cap: usize) -> Self {
        Self {
            cuts: Vec::new(),
            visited: Vec::new(),
            cap,
        }
    }

    /// Max of cuts; `-inf` on an empty pool.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.cuts
            .iter()
            .map(|c| c.evaluate(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Level-one selection: keep every cut that attains the pointwise maximum at
/// at least one visited state; if more than `cap` survive, keep the `cap`
/// cuts maximal at the most states, breaking ties by recency (newest first).
/// The max-of-cuts restricted to the visited states is unchanged whenever at
/// most `cap` cuts are level-one active.
pub fn cut_select_level1(pool: &CutPool) -> CutPool {
    if pool.cuts.is_empty() || pool.visited.is_empty() {
        return pool.clone();
    }
    const TIE_TOL: f64 = 1e-12;
    let mut counts = vec![0usize; pool.cuts.len()];
    for x in &pool.visited {
        let vals: Vec<f64> = pool.cuts.iter().map(|c| c.evaluate(x)).collect();
        let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // ties: credit only the most recent cut attaining the maximum, so
        // duplicates collapse to one survivor
        if let Some(k) = (0..vals.len()).rev().find(|&k| vals[k] >= best - TIE_TOL) {
            counts[k] += 1;
        }
    }
    let mut keep: Vec<usize> = (0..pool.cuts.len()).filter(|&k| counts[k] > 0).collect();
    keep.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(b.cmp(&a)));
    keep.truncate(pool.cap);
    keep.sort_unstable();
    CutPool {
        cuts: keep.into_iter().map(|k| pool.cuts[k].clone()).collect(),
        visited: pool.visited.clone(),
        cap: pool.cap,
    }
}

/// Concatenated-state bookkeeping.
#[derive(Debug, Clone)]
pub struct StateLayout {
    /// Start offset of each node's block in the global state.
    pub offsets: Vec<usize>,
    pub dim: usize,
}

pub fn state_layout(instance: &Instance) -> StateLayout {
    let mut offsets = Vec::with_capacity(instance.num_nodes());
    let mut dim = 0;
    for node in &instance.nodes {
        offsets.push(dim);
        dim += node.state_dim();
    }
    StateLayout { offsets, dim }
}

pub fn concat_state(x: &[Vec<f64>]) -> Vec<f64> {
    x.iter().flatten().copied().collect()
}

#[derive(Debug, Clone)]
pub struct StageSolution {
    /// Full stage objective including the tail term.
    pub value: f64,
    /// Stage cost only (imports plus edge costs).
    pub stage_cost: f64,
    pub x_out: Vec<f64>,
    /// Subgradient of the stage value with respect to `x_in`.
    pub subgradient: Vec<f64>,
    pub u_ne: Vec<f64>,
    pub u_t: Vec<f64>,
    /// Net battery power per node (0 for battery-less nodes).
    pub u_b: Vec<f64>,
    pub q: Vec<f64>,
    /// Node injections `f = -A q`.
    pub flows: Vec<f64>,
}

/// One-stage global convex program at stage `t`, state `x_in`, and realised
/// joint noise `w` (layout `[d_hw^1, d_el^1, d_hw^2, ...]`). The tail is
/// `theta >= cuts of next_pool` for interior stages and the exact per-node
/// terminal hinge at the last stage (`next_pool` ignored there).
pub fn stage_solve(
    instance: &Instance,
    t: usize,
    x_in: &[f64],
    w: &[f64],
    next_pool: Option<&CutPool>,
    layout: &StateLayout,
) -> Result<StageSolution> {
    let n = instance.num_nodes();
    let m = instance.num_edges();
    let dt = instance.dt;
    let terminal = t + 1 == instance.horizon;

    // variable layout: per node [u_t, u_ne, (u_bp, u_bm), x_out...],
    // then edge flows, then the tail variables
    let mut node_base = Vec::with_capacity(n);
    let mut nv = 0usize;
    for node in &instance.nodes {
        node_base.push(nv);
        nv += 2 + if node.battery.is_some() { 2 } else { 0 } + node.state_dim();
    }
    let q_base = nv;
    let tail_base = q_base + m;
    let num_vars = tail_base + if terminal { n } else { 1 };

    let mut qp = QpBuilder::new(num_vars);
    let mut dyn_rows: Vec<(usize, f64)> = Vec::with_capacity(layout.dim); // (eq row, chain factor)
    let mut x_out_idx: Vec<usize> = Vec::with_capacity(layout.dim);
    let mut balance_terms: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];

    for (i, node) in instance.nodes.iter().enumerate() {
        let base = node_base[i];
        let v_ut = base;
        let v_une = base + 1;
        let has_batt = node.battery.is_some();
        let (v_ubp, v_ubm) = (base + 2, base + 3);
        let x_base = base + 2 + if has_batt { 2 } else { 0 };
        let x_in_i = &x_in[layout.offsets[i]..layout.offsets[i] + node.state_dim()];
        let (d_hw, d_el) = (w[2 * i], w[2 * i + 1]);

        qp.add_lin(v_une, node.import_price[t] * dt);
        qp.add_bounds(v_ut, 0.0, node.tank.heat_power_max);
        qp.add_bounds(v_une, 0.0, node.import_max);

        let mut k = 0;
        if let Some(b) = &node.battery {
            qp.add_bounds(v_ubp, 0.0, b.power_max);
            qp.add_bounds(v_ubm, 0.0, -b.power_min);
            let v_bout = x_base;
            qp.add_bounds(v_bout, b.level_min, b.level_max);
            // b_out - dt*rho_c*u_bp + (dt/rho_d)*u_bm = alpha_b * b_in
            let row = qp.add_eq(
                vec![
                    (v_bout, 1.0),
                    (v_ubp, -dt * b.charge_yield),
                    (v_ubm, dt / b.discharge_yield),
                ],
                b.auto_discharge * x_in_i[0],
            );
            dyn_rows.push((row, b.auto_discharge));
            x_out_idx.push(v_bout);
            k = 1;
        }
        let tank = &node.tank;
        let v_hout = x_base + k;
        qp.add_bounds(v_hout, tank.level_min, tank.level_max);
        // h_out - dt*beta_h*u_t = alpha_h * h_in - d_hw
        let row = qp.add_eq(
            vec![(v_hout, 1.0), (v_ut, -dt * tank.conversion)],
            tank.conduction_loss * x_in_i[k] - d_hw,
        );
        dyn_rows.push((row, tank.conduction_loss));
        x_out_idx.push(v_hout);

        // balance (Kirchhoff with f eliminated):
        // (A q)_i + u_ne - u_bp + u_bm - u_t = d_el / dt
        let mut terms = vec![(v_une, 1.0), (v_ut, -1.0)];
        if has_batt {
            terms.push((v_ubp, -1.0));
            terms.push((v_ubm, 1.0));
        }
        balance_terms[i] = terms;

        if terminal {
            let v_s = tail_base + i;
            qp.add_lin(v_s, 1.0);
            qp.add_bounds(v_s, 0.0, f64::INFINITY);
            // s >= kappa * (h_ref - h_out)
            qp.add_ineq(
                vec![(v_s, -1.0), (v_hout, -tank.penalty_rate)],
                -tank.penalty_rate * tank.level_ref,
            );
        }
        let _ = d_el; // consumed below via w
    }

    for e in 0..m {
        let sc = &instance.edge_costs[e].stages[t];
        let v_q = q_base + e;
        qp.add_quad(v_q, sc.quad);
        qp.add_lin(v_q, sc.lin);
        qp.add_bounds(v_q, sc.q_min, sc.q_max);
        let (tail, head) = instance.topology.edges()[e];
        balance_terms[tail].push((v_q, 1.0));
        balance_terms[head].push((v_q, -1.0));
    }

    for (i, node) in instance.nodes.iter().enumerate() {
        let _ = node;
        let d_el = w[2 * i + 1];
        qp.add_eq(std::mem::take(&mut balance_terms[i]), d_el / dt);
    }

    if !terminal {
        let pool = next_pool.ok_or_else(|| Error::StageSolveFailed {
            stage: t,
            reason: "missing cut pool for the next stage".into(),
        })?;
        let v_theta = tail_base;
        qp.add_lin(v_theta, 1.0);
        for cut in &pool.cuts {
            // theta >= intercept + slope . x_out
            let mut coeffs = vec![(v_theta, -1.0)];
            for (j, &s) in cut.slope.iter().enumerate() {
                if s != 0.0 {
                    coeffs.push((x_out_idx[j], s));
                }
            }
            qp.add_ineq(coeffs, -cut.intercept);
        }
        if pool.cuts.is_empty() {
            return Err(Error::StageSolveFailed {
                stage: t,
                reason: "empty cut pool makes the stage unbounded".into(),
            });
        }
    }

    let (outcome, solution) = qp.solve();
    let sol = match (outcome, solution) {
        (QpOutcome::Solved, Some(s)) => s,
        (outcome, _) => {
            return Err(Error::StageSolveFailed {
                stage: t,
                reason: format!("stage program not solved: {outcome:?} at noise {w:?}"),
            })
        }
    };

    let mut subgradient = vec![0.0; layout.dim];
    for (j, &(row, factor)) in dyn_rows.iter().enumerate() {
        // dV/d(rhs) = -z; the in-state enters the rhs scaled by the decay
        subgradient[j] = -sol.eq_duals[row] * factor;
    }
    let x_out: Vec<f64> = x_out_idx.iter().map(|&v| sol.x[v]).collect();
    let tail_value: f64 = if terminal {
        (0..n).map(|i| sol.x[tail_base + i]).sum()
    } else {
        sol.x[tail_base]
    };
    let q: Vec<f64> = (0..m).map(|e| sol.x[q_base + e]).collect();
    let aq = instance.incidence.apply(&q);
    let mut u_ne = Vec::with_capacity(n);
    let mut u_t = Vec::with_capacity(n);
    let mut u_b = Vec::with_capacity(n);
    for (i, node) in instance.nodes.iter().enumerate() {
        let base = node_base[i];
        u_t.push(sol.x[base]);
        u_ne.push(sol.x[base + 1]);
        u_b.push(if node.battery.is_some() {
            sol.x[base + 2] - sol.x[base + 3]
        } else {
            0.0
        });
    }
    Ok(StageSolution {
        value: sol.objective,
        stage_cost: sol.objective - tail_value,
        x_out,
        subgradient,
        u_ne,
        u_t,
        u_b,
        q,
        flows: aq.iter().map(|v| -v).collect(),
    })
}

/// Stage-wise lower bound used to seed empty pools: the sum over remaining
/// stages of the unconstrained-by-coupling minimum edge cost (node costs are
/// nonnegative under nonnegative prices, the terminal cost is nonnegative).
fn seed_intercepts(instance: &Instance) -> Vec<f64> {
    let horizon = instance.horizon;
    let mut stage_min = vec![0.0; horizon];
    for t in 0..horizon {
        let mut acc = 0.0;
        for cost in &instance.edge_costs {
            let sc = &cost.stages[t];
            let mut best = sc.cost(sc.q_min).min(sc.cost(sc.q_max));
            if sc.quad > 0.0 {
                let v = -sc.lin / (2.0 * sc.quad);
                if v > sc.q_min && v < sc.q_max {
                    best = best.min(sc.cost(v));
                }
            }
            acc += best.min(0.0);
        }
        stage_min[t] = acc;
    }
    // tails[t] underestimates V_t
    let mut tails = vec![0.0; horizon + 1];
    for t in (0..horizon).rev() {
        tails[t] = tails[t + 1] + stage_min[t];
    }
    tails
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SddpTraceRow {
    pub iteration: usize,
    pub lower_bound: f64,
    pub ub_mean: Option<f64>,
    pub ub_half_width: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SddpResult {
    /// `pools[t]` under-estimates `V_t` for `t = 1..horizon-1`; entries 0 and
    /// beyond are unused (stage 0 is evaluated directly, the terminal cost is
    /// exact).
    pub pools: Vec<CutPool>,
    pub lower_bound: f64,
    pub trace: Vec<SddpTraceRow>,
    pub iterations: usize,
    /// Resampled stage laws actually used.
    pub resampled: Vec<FiniteDistribution>,
}

pub fn write_sddp_trace_csv(path: &std::path::Path, trace: &[SddpTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "lower_bound", "ub_mean", "ub_half_width"])?;
    for row in trace {
        w.write_record([
            row.iteration.to_string(),
            format!("{:.17e}", row.lower_bound),
            row.ub_mean.map_or(String::new(), |v| format!("{v:.17e}")),
            row.ub_half_width
                .map_or(String::new(), |v| format!("{v:.17e}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn pool_for<'a>(pools: &'a [CutPool], t: usize, horizon: usize) -> Option<&'a CutPool> {
    if t + 1 == horizon {
        None
    } else {
        Some(&pools[t + 1])
    }
}

/// First-stage value of the resampled problem under the current pools.
fn lower_bound(
    instance: &Instance,
    x0: &[f64],
    pools: &[CutPool],
    resampled: &[FiniteDistribution],
    layout: &StateLayout,
) -> Result<f64> {
    let dist = &resampled[0];
    let horizon = instance.horizon;
    let contributions: Vec<Result<f64>> = dist
        .atoms()
        .par_iter()
        .zip(dist.probabilities())
        .map(|(atom, &prob)| {
            if prob == 0.0 {
                return Ok(0.0);
            }
            let sol = stage_solve(instance, 0, x0, atom, pool_for(pools, 0, horizon), layout)?;
            Ok(prob * sol.value)
        })
        .collect();
    let mut lb = 0.0;
    for c in contributions {
        lb += c?;
    }
    Ok(lb)
}

/// Rolls the cut-induced policy on scenarios from the original noise law and
/// returns the sample mean and the 95% confidence half-width.
pub fn statistical_upper_bound(
    instance: &Instance,
    x0: &[Vec<f64>],
    pools: &[CutPool],
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let layout = state_layout(instance);
    let horizon = instance.horizon;
    let scenarios = sample_scenarios(&instance.noise, n, seed);
    let x0c = concat_state(x0);
    let costs: Vec<Result<f64>> = scenarios
        .par_iter()
        .map(|sc| {
            let mut x = x0c.clone();
            let mut total = 0.0;
            for t in 0..horizon {
                let mut w = Vec::with_capacity(2 * instance.num_nodes());
                for noise in &sc.draws[t] {
                    w.push(noise.hot_water);
                    w.push(noise.electricity);
                }
                let sol = stage_solve(instance, t, &x, &w, pool_for(pools, t, horizon), &layout)?;
                total += sol.stage_cost;
                x = sol.x_out;
            }
            for (i, node) in instance.nodes.iter().enumerate() {
                let offset: usize = instance.nodes[..i].iter().map(|n| n.state_dim()).sum();
                total += crate::prosumer::terminal_cost(
                    &node.tank,
                    &x[offset..offset + node.state_dim()],
                );
            }
            Ok(total)
        })
        .collect();
    let mut values = Vec::with_capacity(n);
    for c in costs {
        values.push(c?);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

pub fn sddp_run(instance: &Instance, x0: &[Vec<f64>], opts: &SddpOptions) -> Result<SddpResult> {
    instance.validate()?;
    if !instance.prices_nonnegative() {
        return Err(Error::InvalidInstance(
            "the global stage solver requires nonnegative import prices".into(),
        ));
    }
    let horizon = instance.horizon;
    let layout = state_layout(instance);
    let x0c = concat_state(x0);

    let resampled: Vec<FiniteDistribution> = (0..horizon)
        .map(|t| {
            resample_product(
                &instance.noise,
                t,
                opts.resample_k,
                opts.resample_samples,
                opts.seed ^ (t as u64).wrapping_mul(0x9E3779B97F4A7C15),
            )
        })
        .collect::<Result<_>>()?;

    let seeds = seed_intercepts(instance);
    let mut pools: Vec<CutPool> = (0..horizon)
        .map(|t| {
            let mut pool = CutPool::new(opts.cut_cap);
            if t >= 1 {
                pool.cuts.push(Cut {
                    intercept: seeds[t],
                    slope: vec![0.0; layout.dim],
                    stage: t,
                    iteration: 0,
                });
            }
            pool
        })
        .collect();

    let mut trace = Vec::new();
    let mut lb = f64::NEG_INFINITY;
    let mut iterations = 0;

    use rand_chacha::rand_core::SeedableRng;

    for iter in 1..=opts.max_iters {
        iterations = iter;
        // forward pass: one scenario from the resampled law
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            opts.seed ^ (iter as u64).wrapping_mul(0xD1B54A32D192ED03),
        );
        let mut x = x0c.clone();
        let mut visited: Vec<Vec<f64>> = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let dist = &resampled[t];
            let atom = &dist.atoms()[dist.sample_index(&mut rng)];
            let sol = stage_solve(instance, t, &x, atom, pool_for(&pools, t, horizon), &layout)?;
            x = sol.x_out;
            if t + 1 < horizon {
                visited.push(x.clone());
                pools[t + 1].visited.push(x.clone());
            }
        }

        // backward pass: refresh cuts at the visited states, last stage first
        for t in (1..horizon).rev() {
            let x_t = &visited[t - 1];
            let dist = &resampled[t];
            let results: Vec<Result<(f64, Vec<f64>)>> = dist
                .atoms()
                .par_iter()
                .zip(dist.probabilities())
                .map(|(atom, &prob)| {
                    if prob == 0.0 {
                        return Ok((0.0, vec![0.0; layout.dim]));
                    }
                    let sol =
                        stage_solve(instance, t, x_t, atom, pool_for(&pools, t, horizon), &layout)?;
                    Ok((
                        prob * sol.value,
                        sol.subgradient.iter().map(|g| prob * g).collect(),
                    ))
                })
                .collect();
            let mut value = 0.0;
            let mut slope = vec![0.0; layout.dim];
            for r in results {
                let (v, g) = r?;
                value += v;
                for (a, b) in slope.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let intercept = value - slope.iter().zip(x_t).map(|(s, v)| s * v).sum::<f64>();
            pools[t].cuts.push(Cut {
                intercept,
                slope,
                stage: t,
                iteration: iter,
            });
            if pools[t].cuts.len() > pools[t].cap {
                pools[t] = cut_select_level1(&pools[t]);
            }
        }

        let new_lb = lower_bound(instance, &x0c, &pools, &resampled, &layout)?;
        lb = new_lb.max(lb);

        let mut row = SddpTraceRow {
            iteration: iter,
            lower_bound: lb,
            ub_mean: None,
            ub_half_width: None,
        };
        if iter % opts.ub_every == 0 {
            let (mean, half) =
                statistical_upper_bound(instance, x0, &pools, opts.ub_scenarios, opts.seed ^ 0x5bd1)?;
            row.ub_mean = Some(mean);
            row.ub_half_width = Some(half);
            trace.push(row);
            if mean.abs() > 0.0 && (mean - lb) / mean.abs() < opts.gap_tol {
                break;
            }
        } else {
            trace.push(row);
        }
    }

    Ok(SddpResult {
        pools,
        lower_bound: lb,
        trace,
        iterations,
        resampled,
    })
}
