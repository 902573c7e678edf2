//! Edge subproblems: the per-edge per-stage price problem (closed form) and
//! the per-stage equality-constrained resource flow problem with
//! multipliers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{FlowVector, GraphTopology, IncidenceMatrix};
use crate::qp::{QpBuilder, QpOutcome};

/// Convex transport cost on one edge at one stage:
/// `a q^2 + b q` on the box `[q_min, q_max]` (bounds possibly infinite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeStageCost {
    pub quad: f64,
    pub lin: f64,
    pub q_min: f64,
    pub q_max: f64,
}

impl EdgeStageCost {
    pub fn validate(&self) -> Result<()> {
        if self.quad < 0.0 {
            return Err(Error::InvalidParameter("edge quadratic coefficient must be >= 0".into()));
        }
        if self.q_min > self.q_max {
            return Err(Error::InvalidParameter("edge flow bounds inverted".into()));
        }
        Ok(())
    }

    pub fn cost(&self, q: f64) -> f64 {
        self.quad * q * q + self.lin * q
    }
}

/// Per-stage cost family of one edge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeCost {
    pub stages: Vec<EdgeStageCost>,
}

impl EdgeCost {
    pub fn uniform(quad: f64, lin: f64, q_min: f64, q_max: f64, horizon: usize) -> Self {
        Self {
            stages: vec![
                EdgeStageCost {
                    quad,
                    lin,
                    q_min,
                    q_max,
                };
                horizon
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct EdgePriceSolution {
    pub flows: FlowVector,
    /// Total of `a q^2 + (b + (A'p)_e) q` over edges and stages.
    pub value: f64,
    /// Per-stage contributions (partial sums over edges).
    pub stage_values: Vec<f64>,
}

/// Minimizes `a q^2 + (b + (A'p_t)_e) q` per edge per stage, in closed form.
///
/// With `a = 0` the minimizer sits at a bound; an open bound in the descent
/// direction makes the problem unbounded and is reported as an error.
pub fn solve_edge_price(
    costs: &[EdgeCost],
    incidence: &IncidenceMatrix,
    prices: &FlowVector,
) -> Result<EdgePriceSolution> {
    let num_edges = incidence.num_edges();
    if costs.len() != num_edges {
        return Err(Error::DimensionMismatch {
            expected: num_edges,
            got: costs.len(),
            context: "edge cost list".into(),
        });
    }
    let horizon = prices.horizon;
    let mut flows = FlowVector::zeros(horizon, num_edges);
    let mut value = 0.0;
    let mut stage_values = vec![0.0; horizon];
    for t in 0..horizon {
        let mu = incidence.apply_transpose(prices.stage(t));
        for e in 0..num_edges {
            let c = &costs[e].stages[t];
            let coeff = c.lin + mu[e];
            let q = if c.quad > 0.0 {
                (-coeff / (2.0 * c.quad)).clamp(c.q_min, c.q_max)
            } else if coeff > 0.0 {
                if c.q_min.is_finite() {
                    c.q_min
                } else {
                    return Err(Error::UnboundedEdgeProblem { edge: e, stage: t });
                }
            } else if coeff < 0.0 {
                if c.q_max.is_finite() {
                    c.q_max
                } else {
                    return Err(Error::UnboundedEdgeProblem { edge: e, stage: t });
                }
            } else {
                0.0f64.clamp(c.q_min, c.q_max)
            };
            *flows.at_mut(t, e) = q;
            let v = c.quad * q * q + coeff * q;
            value += v;
            stage_values[t] += v;
        }
    }
    Ok(EdgePriceSolution {
        flows,
        value,
        stage_values,
    })
}

#[derive(Debug, Clone)]
pub struct EdgeResourceSolution {
    pub flows: FlowVector,
    /// Total transport cost `sum a q^2 + b q`.
    pub value: f64,
    pub stage_values: Vec<f64>,
    /// Gradient of the stage values with respect to `r`, normalized to the
    /// per-component zero-sum subspace. Indexed like `r` (time, node).
    pub multipliers: FlowVector,
}

/// Tolerance on per-component sums deciding membership of `r_t` in `im(A)`.
const IMAGE_TOL: f64 = 1e-9;

/// Solves, for each stage `t`, `min sum_e a_e q^2 + b_e q` subject to
/// `A q_t = -r_t` and the edge bounds.
///
/// Returns the minimizing flows, the value and the equality multipliers
/// `xi_t = d(stage value)/d r_t`. Requires `r_t` to lie in the image of the
/// incidence map (per-component zero sums); otherwise the stage value is
/// `+inf`, reported as an error naming the stage.
pub fn solve_edge_resource(
    costs: &[EdgeCost],
    topology: &GraphTopology,
    incidence: &IncidenceMatrix,
    resources: &FlowVector,
) -> Result<EdgeResourceSolution> {
    let num_edges = incidence.num_edges();
    let num_nodes = incidence.num_nodes();
    if resources.width != num_nodes {
        return Err(Error::DimensionMismatch {
            expected: num_nodes,
            got: resources.width,
            context: "resource width".into(),
        });
    }
    let horizon = resources.horizon;
    let components = topology.components();
    // Keep all rows except the first node of each component; the reduced
    // incidence has full row rank.
    let mut kept_rows: Vec<usize> = Vec::new();
    for comp in &components {
        for &i in comp.iter().skip(1) {
            kept_rows.push(i);
        }
    }

    let mut flows = FlowVector::zeros(horizon, num_edges);
    let mut multipliers = FlowVector::zeros(horizon, num_nodes);
    let mut value = 0.0;
    let mut stage_values = vec![0.0; horizon];

    for t in 0..horizon {
        let r_t = resources.stage(t);
        // membership check: per-component zero sums
        for comp in &components {
            let s: f64 = comp.iter().map(|&i| r_t[i]).sum();
            let scale = comp.iter().map(|&i| r_t[i].abs()).fold(1.0f64, f64::max);
            if s.abs() > IMAGE_TOL * scale {
                return Err(Error::EdgeResourceInfeasible {
                    stage: t,
                    reason: format!(
                        "r_t not in im(A): component sum {s:.3e} over nodes {comp:?}"
                    ),
                });
            }
        }

        let stage_costs: Vec<&EdgeStageCost> = costs.iter().map(|c| &c.stages[t]).collect();
        let unbounded_box = stage_costs
            .iter()
            .all(|c| c.q_min == f64::NEG_INFINITY && c.q_max == f64::INFINITY);
        let strictly_convex = stage_costs.iter().all(|c| c.quad > 0.0);

        let (q, lambda_kept) = if num_edges == 0 {
            (Vec::new(), vec![0.0; kept_rows.len()])
        } else if unbounded_box && strictly_convex {
            solve_stage_kkt(&stage_costs, incidence, &kept_rows, r_t)?
        } else {
            solve_stage_qp(&stage_costs, incidence, &kept_rows, r_t, t)?
        };

        let mut stage_value = 0.0;
        for e in 0..num_edges {
            *flows.at_mut(t, e) = q[e];
            stage_value += stage_costs[e].cost(q[e]);
        }
        value += stage_value;
        stage_values[t] = stage_value;

        // expand multipliers to all nodes (dropped rows at 0), then project
        // onto the per-component zero-sum subspace
        let xi = multipliers.stage_mut(t);
        for (k, &row) in kept_rows.iter().enumerate() {
            xi[row] = lambda_kept[k];
        }
        for comp in &components {
            let mean: f64 = comp.iter().map(|&i| xi[i]).sum::<f64>() / comp.len() as f64;
            for &i in comp {
                xi[i] -= mean;
            }
        }
    }

    Ok(EdgeResourceSolution {
        flows,
        value,
        stage_values,
        multipliers,
    })
}

/// Unbounded strictly-convex case: exact dense KKT solve.
/// System: [2D  Ar'; Ar  0] [q; lambda] = [-b_lin; -r_kept].
fn solve_stage_kkt(
    stage_costs: &[&EdgeStageCost],
    incidence: &IncidenceMatrix,
    kept_rows: &[usize],
    r_t: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ne = stage_costs.len();
    let m = kept_rows.len();
    let dim = ne + m;
    let mut mat = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for e in 0..ne {
        mat[(e, e)] = 2.0 * stage_costs[e].quad;
        rhs[e] = -stage_costs[e].lin;
    }
    for (k, &row) in kept_rows.iter().enumerate() {
        for e in 0..ne {
            let a = incidence.entry(row, e);
            mat[(ne + k, e)] = a;
            mat[(e, ne + k)] = a;
        }
        rhs[ne + k] = -r_t[row];
    }
    let lu = mat.full_piv_lu();
    let sol = lu.solve(&rhs).ok_or_else(|| Error::EdgeResourceInfeasible {
        stage: 0,
        reason: "singular KKT system".into(),
    })?;
    let q = sol.as_slice()[..ne].to_vec();
    let lambda = sol.as_slice()[ne..].to_vec();
    Ok((q, lambda))
}

/// General case with bounds (or zero quadratic terms): interior-point QP.
fn solve_stage_qp(
    stage_costs: &[&EdgeStageCost],
    incidence: &IncidenceMatrix,
    kept_rows: &[usize],
    r_t: &[f64],
    stage: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ne = stage_costs.len();
    let mut qp = QpBuilder::new(ne);
    for (e, c) in stage_costs.iter().enumerate() {
        qp.add_quad(e, c.quad);
        qp.add_lin(e, c.lin);
        qp.add_bounds(e, c.q_min, c.q_max);
    }
    for &row in kept_rows {
        let coeffs: Vec<(usize, f64)> = (0..ne)
            .filter_map(|e| {
                let a = incidence.entry(row, e);
                (a != 0.0).then_some((e, a))
            })
            .collect();
        qp.add_eq(coeffs, -r_t[row]);
    }
    let (outcome, sol) = qp.solve();
    match outcome {
        QpOutcome::Solved => {
            let sol = sol.unwrap();
            // duals z of rows A q = b with b = -r_kept satisfy dV/dr = z
            Ok((sol.x, sol.eq_duals))
        }
        QpOutcome::Infeasible => Err(Error::EdgeResourceInfeasible {
            stage,
            reason: "edge bounds incompatible with the resource".into(),
        }),
        QpOutcome::Unbounded => Err(Error::EdgeResourceInfeasible {
            stage,
            reason: "stage flow problem unbounded (zero quadratic cost with open bounds)".into(),
        }),
        QpOutcome::Failed(msg) => Err(Error::StageSolveFailed { stage, reason: msg }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_incidence;

    fn triangle() -> (GraphTopology, IncidenceMatrix) {
        let topo = GraphTopology::new(3, vec![(0, 1), (1, 2), (0, 2)]).unwrap();
        let inc = build_incidence(&topo);
        (topo, inc)
    }

    #[test]
    fn edge_price_closed_forms() {
        // single directed edge between two nodes; choose p so that (A'p)_e = 2
        let topo = GraphTopology::new(2, vec![(0, 1)]).unwrap();
        let inc = build_incidence(&topo);
        let p = FlowVector::from_values(1, 2, vec![2.0, 0.0]).unwrap();

        let costs = vec![EdgeCost::uniform(1.0, 0.0, f64::NEG_INFINITY, f64::INFINITY, 1)];
        let sol = solve_edge_price(&costs, &inc, &p).unwrap();
        assert!((sol.flows.at(0, 0) + 1.0).abs() < 1e-12);
        assert!((sol.value + 1.0).abs() < 1e-12);

        let costs = vec![EdgeCost::uniform(1.0, 0.0, 0.0, 1.0, 1)];
        let sol = solve_edge_price(&costs, &inc, &p).unwrap();
        assert_eq!(sol.flows.at(0, 0), 0.0);
        assert_eq!(sol.value, 0.0);

        let costs = vec![EdgeCost::uniform(0.0, 0.0, -1.0, 1.0, 1)];
        let sol = solve_edge_price(&costs, &inc, &p).unwrap();
        assert_eq!(sol.flows.at(0, 0), -1.0);
        assert!((sol.value + 2.0).abs() < 1e-12);
    }

    #[test]
    fn edge_price_unbounded_detected() {
        let topo = GraphTopology::new(2, vec![(0, 1)]).unwrap();
        let inc = build_incidence(&topo);
        let p = FlowVector::from_values(1, 2, vec![2.0, 0.0]).unwrap();
        let costs = vec![EdgeCost::uniform(0.0, 0.0, f64::NEG_INFINITY, f64::INFINITY, 1)];
        let err = solve_edge_price(&costs, &inc, &p).unwrap_err();
        assert!(matches!(err, Error::UnboundedEdgeProblem { edge: 0, stage: 0 }));
    }

    #[test]
    fn edge_resource_triangle_hand_solved() {
        let (topo, inc) = triangle();
        let costs = vec![EdgeCost::uniform(1.0, 0.0, f64::NEG_INFINITY, f64::INFINITY, 1); 3];
        let r = FlowVector::from_values(1, 3, vec![1.0, -1.0, 0.0]).unwrap();
        let sol = solve_edge_resource(&costs, &topo, &inc, &r).unwrap();
        let expect = [-2.0 / 3.0, 1.0 / 3.0, -1.0 / 3.0];
        for e in 0..3 {
            assert!((sol.flows.at(0, e) - expect[e]).abs() < 1e-9, "edge {e}");
        }
        assert!((sol.value - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn edge_resource_zero_cases() {
        let (topo, inc) = triangle();
        let costs = vec![EdgeCost::uniform(1.0, 0.0, f64::NEG_INFINITY, f64::INFINITY, 1); 3];
        let r = FlowVector::zeros(1, 3);
        let sol = solve_edge_resource(&costs, &topo, &inc, &r).unwrap();
        assert_eq!(sol.value, 0.0);
        for e in 0..3 {
            assert!(sol.flows.at(0, e).abs() < 1e-12);
        }
        for i in 0..3 {
            assert!(sol.multipliers.at(0, i).abs() < 1e-9);
        }

        // single node, zero edges
        let topo1 = GraphTopology::new(1, vec![]).unwrap();
        let inc1 = build_incidence(&topo1);
        let sol = solve_edge_resource(&[], &topo1, &inc1, &FlowVector::zeros(1, 1)).unwrap();
        assert_eq!(sol.value, 0.0);
        let r_bad = FlowVector::from_values(1, 1, vec![1.0]).unwrap();
        assert!(solve_edge_resource(&[], &topo1, &inc1, &r_bad).is_err());
    }

    #[test]
    fn edge_resource_rejects_r_outside_image() {
        let (topo, inc) = triangle();
        let costs = vec![EdgeCost::uniform(1.0, 0.0, f64::NEG_INFINITY, f64::INFINITY, 1); 3];
        let r = FlowVector::from_values(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let err = solve_edge_resource(&costs, &topo, &inc, &r).unwrap_err();
        assert!(matches!(err, Error::EdgeResourceInfeasible { stage: 0, .. }));
    }

    #[test]
    fn kkt_residual_small_unbounded_case() {
        let (topo, inc) = triangle();
        let costs: Vec<EdgeCost> = (0..3)
            .map(|e| {
                EdgeCost::uniform(0.5 + 0.3 * e as f64, 0.1 * e as f64, f64::NEG_INFINITY, f64::INFINITY, 1)
            })
            .collect();
        let r = FlowVector::from_values(1, 3, vec![0.7, -0.2, -0.5]).unwrap();
        let sol = solve_edge_resource(&costs, &topo, &inc, &r).unwrap();
        // KKT stationarity: 2 a q + b + (A' xi)_e = 0 with the zero-sum xi
        let xi = sol.multipliers.stage(0);
        let atx = inc.apply_transpose(xi);
        for e in 0..3 {
            let c = &costs[e].stages[0];
            let resid = 2.0 * c.quad * sol.flows.at(0, e) + c.lin + atx[e];
            assert!(resid.abs() < 1e-8, "edge {e}: {resid}");
        }
        // equality: A q = -r
        let aq = inc.apply(sol.flows.stage(0));
        for i in 0..3 {
            assert!((aq[i] + r.at(0, i)).abs() < 1e-9);
        }
    }

    #[test]
    fn multiplier_matches_finite_differences() {
        let (topo, inc) = triangle();
        let costs: Vec<EdgeCost> = (0..3)
            .map(|e| EdgeCost::uniform(0.4 + 0.2 * e as f64, -0.1 + 0.05 * e as f64, -5.0, 5.0, 1))
            .collect();
        let r = FlowVector::from_values(1, 3, vec![0.5, 0.1, -0.6]).unwrap();
        let sol = solve_edge_resource(&costs, &topo, &inc, &r).unwrap();
        let h = 1e-5;
        // perturb along a projected (zero-sum) direction
        for i in 0..3 {
            let mut dir = vec![-1.0 / 3.0; 3];
            dir[i] += 1.0;
            let mut rp = r.clone();
            let mut rm = r.clone();
            for j in 0..3 {
                *rp.at_mut(0, j) += h * dir[j];
                *rm.at_mut(0, j) -= h * dir[j];
            }
            let vp = solve_edge_resource(&costs, &topo, &inc, &rp).unwrap().value;
            let vm = solve_edge_resource(&costs, &topo, &inc, &rm).unwrap().value;
            let fd = (vp - vm) / (2.0 * h);
            let analytic: f64 = (0..3).map(|j| sol.multipliers.at(0, j) * dir[j]).sum();
            assert!((fd - analytic).abs() < 1e-4, "dir {i}: fd {fd}, xi {analytic}");
        }
    }
}
