//! Thin wrapper around the Clarabel conic solver for the small dense
//! quadratic programs that appear in the stage problems: diagonal quadratic
//! objective, equality rows and `<=` inequality rows.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

#[derive(Debug, Clone, PartialEq)]
pub enum QpOutcome {
    Solved,
    Infeasible,
    Unbounded,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Duals of the equality rows, in insertion order. Sign convention:
    /// for a row `a'x = b`, the dual `z` satisfies `dV/db = -z`.
    pub eq_duals: Vec<f64>,
    /// Duals of the `<=` rows (nonnegative).
    pub ineq_duals: Vec<f64>,
    pub objective: f64,
}

/// Incremental builder: variables are indexed 0..n; the objective is
/// `sum_i quad[i] x_i^2 + lin[i] x_i`.
pub struct QpBuilder {
    n: usize,
    quad: Vec<f64>,
    lin: Vec<f64>,
    eq_rows: Vec<(Vec<(usize, f64)>, f64)>,
    ineq_rows: Vec<(Vec<(usize, f64)>, f64)>,
}

impl QpBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            quad: vec![0.0; n],
            lin: vec![0.0; n],
            eq_rows: Vec::new(),
            ineq_rows: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    /// Adds `coeff * x_i^2` to the objective.
    pub fn add_quad(&mut self, i: usize, coeff: f64) {
        self.quad[i] += coeff;
    }

    /// Adds `coeff * x_i` to the objective.
    pub fn add_lin(&mut self, i: usize, coeff: f64) {
        self.lin[i] += coeff;
    }

    /// Adds the row `sum coef_j x_j = rhs`; returns its index among
    /// equality rows.
    pub fn add_eq(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.eq_rows.push((coeffs, rhs));
        self.eq_rows.len() - 1
    }

    /// Adds the row `sum coef_j x_j <= rhs`; returns its index among
    /// inequality rows.
    pub fn add_ineq(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.ineq_rows.push((coeffs, rhs));
        self.ineq_rows.len() - 1
    }

    /// Adds `lo <= x_i <= hi`, skipping infinite sides.
    pub fn add_bounds(&mut self, i: usize, lo: f64, hi: f64) {
        if hi.is_finite() {
            self.add_ineq(vec![(i, 1.0)], hi);
        }
        if lo.is_finite() {
            self.add_ineq(vec![(i, -1.0)], -lo);
        }
    }

    pub fn solve(&self) -> (QpOutcome, Option<QpSolution>) {
        let n = self.n;
        let n_eq = self.eq_rows.len();
        let n_ineq = self.ineq_rows.len();

        // Diagonal P (upper triangle); objective is 1/2 x'Px + q'x.
        let (pi, pj, pv): (Vec<usize>, Vec<usize>, Vec<f64>) = {
            let mut i = Vec::new();
            let mut j = Vec::new();
            let mut v = Vec::new();
            for (k, &c) in self.quad.iter().enumerate() {
                if c != 0.0 {
                    i.push(k);
                    j.push(k);
                    v.push(2.0 * c);
                }
            }
            (i, j, v)
        };
        let p_mat = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

        let mut ai = Vec::new();
        let mut aj = Vec::new();
        let mut av = Vec::new();
        let mut b = Vec::with_capacity(n_eq + n_ineq);
        for (row, (coeffs, rhs)) in self.eq_rows.iter().chain(self.ineq_rows.iter()).enumerate() {
            for &(col, val) in coeffs {
                ai.push(row);
                aj.push(col);
                av.push(val);
            }
            b.push(*rhs);
        }
        let a_mat = CscMatrix::new_from_triplets(n_eq + n_ineq, n, ai, aj, av);

        let cones = [
            SupportedConeT::ZeroConeT(n_eq),
            SupportedConeT::NonnegativeConeT(n_ineq),
        ];

        let settings = DefaultSettings {
            verbose: false,
            tol_gap_abs: 1e-10,
            tol_gap_rel: 1e-10,
            tol_feas: 1e-10,
            max_iter: 200,
            ..DefaultSettings::default()
        };

        let mut solver = match DefaultSolver::new(&p_mat, &self.lin, &a_mat, &b, &cones, settings) {
            Ok(s) => s,
            Err(e) => return (QpOutcome::Failed(format!("{e:?}")), None),
        };
        solver.solve();
        let sol = &solver.solution;
        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {
                let eq_duals = sol.z[..n_eq].to_vec();
                let ineq_duals = sol.z[n_eq..].to_vec();
                (
                    QpOutcome::Solved,
                    Some(QpSolution {
                        x: sol.x.clone(),
                        eq_duals,
                        ineq_duals,
                        objective: sol.obj_val,
                    }),
                )
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                (QpOutcome::Infeasible, None)
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                (QpOutcome::Unbounded, None)
            }
            other => (QpOutcome::Failed(format!("{other:?}")), None),
        }
    }
}
