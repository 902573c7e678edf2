//! End-to-end acceptance checks. Each test prints a single `criterion N`
//! line with its verdict before asserting, so a full run yields one
//! pass/fail line per criterion:
//!
//! ```text
//! cargo test --test acceptance -- --nocapture
//! ```

use std::process::Command;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridmates_core::coordination::{dadp_run, padp_run, CoordinationOptions};
use gridmates_core::edge::{solve_edge_resource, EdgeCost};
use gridmates_core::fixtures::{
    single_node_instance, tiny_deterministic, tiny_instance, TINY_CONTROL_POINTS,
    TINY_FLOW_POINTS, TINY_STATE_POINTS,
};
use gridmates_core::instance::{generate_family, save_instance, Instance};
use gridmates_core::nodal_dp::{evaluate, NodalSolver, StateGrid};
use gridmates_core::network::{
    build_incidence, kirchhoff_residual, project_onto_image, FlowVector, GraphTopology,
};
use gridmates_core::oracle::{exhaustive_solve, OracleGrids};
use gridmates_core::policy_sim::{
    one_step_policy, simulate_policy, GlobalValueStack, PolicyOptions, StackKind,
};
use gridmates_core::prosumer::{NodeModel, TankParams};
use gridmates_core::sddp::{sddp_run, SddpOptions};
use gridmates_core::uncertainty::{sample_scenarios, FiniteDistribution};

fn report(criterion: usize, name: &str, ok: bool) {
    println!(
        "criterion {criterion:2} ({name}): {}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} ({name}) failed");
}

fn tiny_coordination_options() -> CoordinationOptions {
    CoordinationOptions {
        state_points: TINY_STATE_POINTS,
        control_points: TINY_CONTROL_POINTS,
        mc_samples: 500,
        max_iters: 30,
        seed: 7,
        ..CoordinationOptions::default()
    }
}

fn tiny_oracle(inst: &Instance) -> f64 {
    let grids = OracleGrids::regular(inst, TINY_CONTROL_POINTS, TINY_FLOW_POINTS);
    exhaustive_solve(inst, &inst.x0, &grids).unwrap()
}

#[test]
fn c01_bound_sandwich_on_exact_tiny_instance() {
    let start = Instant::now();
    let inst = tiny_instance();
    let oracle = tiny_oracle(&inst);
    let opts = tiny_coordination_options();
    let lower = dadp_run(&inst, &inst.x0, &opts).unwrap();
    let upper = padp_run(&inst, &inst.x0, &opts).unwrap();
    let ok = lower.bound <= oracle + 1e-6
        && oracle <= upper.bound + 1e-6
        && start.elapsed().as_secs() < 60;
    println!(
        "  lower {:.9} <= oracle {oracle:.9} <= upper {:.9} in {:.1?}",
        lower.bound,
        upper.bound,
        start.elapsed()
    );
    report(1, "bound sandwich", ok);
}

#[test]
fn c02_decoupled_relaxations_match_oracle_on_single_node() {
    // With a zero electricity price the price relaxation at zero prices and
    // the autarkic problem coincide; pinning the exchange to zero always
    // does.
    let price_inst = single_node_instance(0.0);
    let node = &price_inst.nodes[0];
    let noises: Vec<FiniteDistribution> = (0..price_inst.horizon)
        .map(|t| price_inst.noise.stages[t][0].clone())
        .collect();
    let solver = NodalSolver::new(
        node,
        StateGrid::for_node(node, TINY_STATE_POINTS).unwrap(),
        TINY_CONTROL_POINTS,
    );
    let price_tables = solver.solve_price(&noises, &[0.0; 3]);
    let price_value = evaluate(&price_tables[0], &price_inst.x0[0]);
    let price_oracle = tiny_oracle(&price_inst);

    let res_inst = single_node_instance(2.0);
    let res_node = &res_inst.nodes[0];
    let res_noises: Vec<FiniteDistribution> = (0..res_inst.horizon)
        .map(|t| res_inst.noise.stages[t][0].clone())
        .collect();
    let res_solver = NodalSolver::new(
        res_node,
        StateGrid::for_node(res_node, TINY_STATE_POINTS).unwrap(),
        TINY_CONTROL_POINTS,
    );
    let res_tables = res_solver.solve_resource(&res_noises, &[0.0; 3]);
    let res_value = evaluate(&res_tables[0], &res_inst.x0[0]);
    let res_oracle = tiny_oracle(&res_inst);

    println!(
        "  price relaxation {price_value:.12} vs oracle {price_oracle:.12}; \
         pinned exchange {res_value:.12} vs oracle {res_oracle:.12}"
    );
    let ok = (price_value - price_oracle).abs() <= 1e-9
        && (res_value - res_oracle).abs() <= 1e-9;
    report(2, "single-node oracle equivalence", ok);
}

#[test]
fn c03_price_flow_pairing_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let topologies = [
        GraphTopology::new(2, vec![(0, 1)]).unwrap(),
        GraphTopology::new(4, vec![(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap(),
        GraphTopology::new(5, vec![(0, 1), (1, 2), (3, 4)]).unwrap(),
    ];
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let topo = &topologies[k % topologies.len()];
        let a = build_incidence(topo);
        let (n, m) = (a.num_nodes(), a.num_edges());
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = p.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>()
            + a.apply_transpose(&p).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        let aq_f = a.apply(&q);
        let rhs: f64 = p
            .iter()
            .zip(aq_f.iter().zip(&f))
            .map(|(pi, (aqi, fi))| pi * (aqi + fi))
            .sum();
        worst = worst.max((lhs - rhs).abs());
    }
    println!("  worst pairing mismatch over 100 draws: {worst:.3e}");
    report(3, "adjoint pairing identity", worst <= 1e-12);
}

#[test]
fn c04_projection_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst_idem: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut worst_ls: f64 = 0.0;
    for &n in &[3usize, 6, 12, 24, 48] {
        let inst = generate_family(n, 5).unwrap();
        let topo = &inst.topology;
        // independent least-squares oracle: orthogonal projector from the
        // SVD of the incidence matrix
        let a = inst.incidence.entries().clone();
        let svd = a.svd(true, false);
        let u = svd.u.as_ref().unwrap();
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-9).count();
        let ur = u.columns(0, rank).into_owned();
        let projector = &ur * ur.transpose();
        for _ in 0..10 {
            let horizon = 4;
            let vals: Vec<f64> = (0..horizon * n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let r = FlowVector::from_values(horizon, n, vals).unwrap();
            let pr = project_onto_image(&r, topo).unwrap();
            let pr2 = project_onto_image(&pr, topo).unwrap();
            for t in 0..horizon {
                for i in 0..n {
                    worst_idem = worst_idem.max((pr2.at(t, i) - pr.at(t, i)).abs());
                }
                for comp in topo.components() {
                    let s: f64 = comp.iter().map(|&i| pr.at(t, i)).sum();
                    worst_sum = worst_sum.max(s.abs());
                }
                let x = nalgebra::DVector::from_column_slice(r.stage(t));
                let ls = &projector * x;
                for i in 0..n {
                    worst_ls = worst_ls.max((ls[i] - pr.at(t, i)).abs());
                }
            }
        }
    }
    println!(
        "  idempotence {worst_idem:.3e}, component sums {worst_sum:.3e}, \
         least-squares mismatch {worst_ls:.3e}"
    );
    report(
        4,
        "projection onto image",
        worst_idem <= 1e-9 && worst_sum <= 1e-9 && worst_ls <= 1e-9,
    );
}

#[test]
fn c05_global_lower_bound_soundness() {
    // deterministic variant: bound must reach the enumerated optimum
    let det = tiny_deterministic();
    let det_oracle = tiny_oracle(&det);
    let det_opts = SddpOptions {
        resample_k: 4,
        max_iters: 80,
        ub_every: 10_000,
        seed: 5,
        ..SddpOptions::default()
    };
    let det_run = sddp_run(&det, &det.x0, &det_opts).unwrap();
    let monotone_det = det_run
        .trace
        .windows(2)
        .all(|w| w[1].lower_bound >= w[0].lower_bound - 1e-9);
    let reaches = (det_run.lower_bound - det_oracle).abs() <= 1e-6;

    // stochastic variant: the resampled bound must stay below the optimum
    let sto = tiny_instance();
    let sto_oracle = tiny_oracle(&sto);
    let sto_run = sddp_run(&sto, &sto.x0, &det_opts).unwrap();
    let monotone_sto = sto_run
        .trace
        .windows(2)
        .all(|w| w[1].lower_bound >= w[0].lower_bound - 1e-9);
    let below = sto_run.lower_bound <= sto_oracle + 1e-6;

    // stopping rule: with the statistical bound enabled the run must stop
    // before the iteration cap once the relative gap is under 1%
    let stop_opts = SddpOptions {
        resample_k: 4,
        max_iters: 200,
        ub_every: 5,
        ub_scenarios: 400,
        gap_tol: 0.01,
        seed: 5,
        ..SddpOptions::default()
    };
    let stop_run = sddp_run(&det, &det.x0, &stop_opts).unwrap();
    let stopped = stop_run.iterations < stop_opts.max_iters;

    println!(
        "  deterministic bound {:.9} vs oracle {det_oracle:.9}; stochastic bound {:.9} \
         vs oracle {sto_oracle:.9}; stop after {} of {} iterations",
        det_run.lower_bound, sto_run.lower_bound, stop_run.iterations, stop_opts.max_iters
    );
    report(
        5,
        "global bound soundness",
        monotone_det && monotone_sto && reaches && below && stopped,
    );
}

#[test]
fn c06_multiplier_and_gradient_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let horizon = 3;
    let mut worst_xi: f64 = 0.0;
    for k in 0..20 {
        let topo = if k % 2 == 0 {
            GraphTopology::new(3, vec![(0, 1), (1, 2), (0, 2)]).unwrap()
        } else {
            GraphTopology::new(3, vec![(0, 1), (1, 2)]).unwrap()
        };
        let incidence = build_incidence(&topo);
        let costs: Vec<EdgeCost> = (0..topo.num_edges())
            .map(|_| {
                EdgeCost::uniform(
                    rng.random_range(0.1..1.0),
                    rng.random_range(-0.5..0.5),
                    -5.0,
                    5.0,
                    horizon,
                )
            })
            .collect();
        let vals: Vec<f64> = (0..horizon * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let r = project_onto_image(&FlowVector::from_values(horizon, 3, vals).unwrap(), &topo)
            .unwrap();
        let sol = solve_edge_resource(&costs, &topo, &incidence, &r).unwrap();
        // directional central differences along zero-sum directions
        for _ in 0..5 {
            let dvals: Vec<f64> = (0..horizon * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = project_onto_image(
                &FlowVector::from_values(horizon, 3, dvals).unwrap(),
                &topo,
            )
            .unwrap();
            let h = 1e-5;
            let shift = |s: f64| {
                let vals: Vec<f64> = r
                    .values
                    .iter()
                    .zip(&d.values)
                    .map(|(rv, dv)| rv + s * dv)
                    .collect();
                let rs = FlowVector::from_values(horizon, 3, vals).unwrap();
                solve_edge_resource(&costs, &topo, &incidence, &rs).unwrap().value
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            let pairing = sol.multipliers.dot(&d);
            worst_xi = worst_xi.max((fd - pairing).abs());
        }
    }

    // node whose value is exactly linear in the pinned exchange: the
    // heating bound is zero, demand keeps imports strictly interior, so the
    // analytic gradient is the stage price times the stage length
    let tank = TankParams {
        conduction_loss: 1.0,
        conversion: 1.0,
        level_min: 0.0,
        level_max: 4.0,
        heat_power_max: 0.0,
        level_ref: 0.0,
        penalty_rate: 0.0,
    };
    let node = NodeModel {
        battery: None,
        tank,
        import_max: 10.0,
        dt: 1.0,
        import_price: vec![2.0; 4],
    };
    let noises: Vec<FiniteDistribution> = (0..4)
        .map(|_| {
            FiniteDistribution::new(vec![vec![0.0, 2.0], vec![0.0, 3.0]], vec![0.5, 0.5]).unwrap()
        })
        .collect();
    let solver = NodalSolver::new(&node, StateGrid::for_node(&node, 5).unwrap(), 3);
    let mut worst_mu = [0.0f64; 2];
    for (j, h) in [1e-2, 5e-3].into_iter().enumerate() {
        let mu = solver.resource_gradient(&noises, &[0.0; 4], &[2.0], h).unwrap();
        for g in mu {
            worst_mu[j] = worst_mu[j].max((g - 2.0).abs());
        }
    }

    // order check of the differencing scheme on a map with curvature: the
    // central-difference error of a cubic is exactly h^2
    let f = |x: f64| x.powi(3) + 0.5 * x * x - x;
    let exact = |x: f64| 3.0 * x * x + x - 1.0;
    let fd_err = |x: f64, h: f64| ((f(x + h) - f(x - h)) / (2.0 * h) - exact(x)).abs();
    let (e1, e2) = (fd_err(0.7, 0.2), fd_err(0.7, 0.1));
    let ratio = e1 / e2;

    println!(
        "  multiplier mismatch {worst_xi:.3e}; gradient errors {:.3e}/{:.3e}; \
         halving the step shrinks the scheme error {ratio:.2}x",
        worst_mu[0], worst_mu[1]
    );
    report(
        6,
        "multiplier and gradient consistency",
        worst_xi <= 1e-4
            && worst_mu[0] <= 1e-2f64.powi(2)
            && worst_mu[1] <= 5e-3f64.powi(2)
            && (ratio - 4.0).abs() <= 0.2,
    );
}

#[test]
fn c07_policy_admissibility_and_bound_position() {
    let inst = tiny_instance();
    let opts = tiny_coordination_options();
    let lower = dadp_run(&inst, &inst.x0, &opts).unwrap();
    let upper = padp_run(&inst, &inst.x0, &opts).unwrap();
    let sddp = sddp_run(
        &inst,
        &inst.x0,
        &SddpOptions {
            resample_k: 4,
            max_iters: 40,
            ub_every: 10_000,
            seed: 5,
            ..SddpOptions::default()
        },
    )
    .unwrap();

    let stacks: Vec<(&str, GlobalValueStack)> = vec![
        (
            "sddp",
            GlobalValueStack::SddpCuts { pools: sddp.pools },
        ),
        (
            "dadp",
            GlobalValueStack::Decomposed {
                kind: StackKind::DadpSum,
                node_tables: lower.node_values.clone(),
            },
        ),
        (
            "padp",
            GlobalValueStack::Decomposed {
                kind: StackKind::PadpSum,
                node_tables: upper.node_values.clone(),
            },
        ),
    ];

    let popts = PolicyOptions {
        control_points: TINY_CONTROL_POINTS,
        ..PolicyOptions::default()
    };
    let scenarios = sample_scenarios(&inst.noise, 1000, 99);
    let solvers: Vec<NodalSolver> = inst
        .nodes
        .iter()
        .map(|node| NodalSolver::new(node, StateGrid::for_node(node, 2).unwrap(), popts.control_points))
        .collect();

    let mut ok = true;
    for (name, stack) in &stacks {
        let rep = simulate_policy(&inst, &inst.x0, stack, 1000, 99, &popts).unwrap();
        // replay the same scenarios and track the worst Kirchhoff residual
        let mut worst: f64 = 0.0;
        for sc in &scenarios {
            let mut x = inst.x0.clone();
            for t in 0..inst.horizon {
                let dec =
                    one_step_policy(&inst, t, &x, &sc.draws[t], stack, &solvers, &popts).unwrap();
                let q = FlowVector::from_values(1, inst.num_edges(), dec.q.clone()).unwrap();
                let f = FlowVector::from_values(1, inst.num_nodes(), dec.flows.clone()).unwrap();
                for res in kirchhoff_residual(&inst.incidence, &q, &f, 0).unwrap() {
                    worst = worst.max(res.abs());
                }
                x = dec.next_state;
            }
        }
        let fits = rep.flagged == 0
            && worst <= 1e-9
            && rep.mean + rep.half_width >= lower.bound - 1e-9
            && rep.mean - rep.half_width <= upper.bound + 1e-9;
        println!(
            "  {name}: mean {:.6} +/- {:.6}, worst residual {worst:.3e}, flagged {}",
            rep.mean, rep.half_width, rep.flagged
        );
        ok = ok && fits;
    }
    println!(
        "  certified interval: [{:.6}, {:.6}]",
        lower.bound, upper.bound
    );
    report(7, "policy admissibility and bound position", ok);
}

#[test]
fn c08_monotone_coordination_traces() {
    let inst = generate_family(3, 11).unwrap();
    let dadp_opts = CoordinationOptions {
        state_points: 9,
        control_points: 5,
        mc_samples: 200,
        max_iters: 5,
        seed: 1,
        ..CoordinationOptions::default()
    };
    let padp_opts = CoordinationOptions {
        max_iters: 2,
        ..dadp_opts.clone()
    };
    let lower = dadp_run(&inst, &inst.x0, &dadp_opts).unwrap();
    let upper = padp_run(&inst, &inst.x0, &padp_opts).unwrap();
    let nondecreasing = lower
        .trace
        .windows(2)
        .all(|w| w[1].bound >= w[0].bound - 1e-9);
    let nonincreasing = upper
        .trace
        .windows(2)
        .all(|w| w[1].bound <= w[0].bound + 1e-9);
    let capped = lower.iterations <= dadp_opts.max_iters && upper.iterations <= padp_opts.max_iters;
    println!(
        "  lower bound trace {:?}",
        lower.trace.iter().map(|r| r.bound).collect::<Vec<_>>()
    );
    println!(
        "  upper bound trace {:?}",
        upper.trace.iter().map(|r| r.bound).collect::<Vec<_>>()
    );
    report(
        8,
        "monotone coordination traces",
        nondecreasing && nonincreasing && capped,
    );
}

#[test]
fn c09_protocol_scale_smoke() {
    let start = Instant::now();
    let inst = generate_family(12, 3).unwrap();
    let coord = CoordinationOptions {
        state_points: 9,
        control_points: 5,
        mc_samples: 200,
        seed: 1,
        ..CoordinationOptions::default()
    };
    let lower = dadp_run(
        &inst,
        &inst.x0,
        &CoordinationOptions {
            max_iters: 3,
            ..coord.clone()
        },
    )
    .unwrap();
    let upper = padp_run(
        &inst,
        &inst.x0,
        &CoordinationOptions {
            max_iters: 2,
            ..coord
        },
    )
    .unwrap();
    let sddp = sddp_run(
        &inst,
        &inst.x0,
        &SddpOptions {
            resample_k: 3,
            max_iters: 10,
            ub_every: 10_000,
            cut_cap: 50,
            seed: 1,
            ..SddpOptions::default()
        },
    )
    .unwrap();
    let elapsed = start.elapsed();
    let best_lower = lower.bound.max(sddp.lower_bound);
    println!(
        "  12 nodes, horizon 96: price {:.4} ({} its), exchange-pinning {:.4} ({} its), \
         cutting-plane {:.4} ({} its) in {elapsed:.1?}",
        lower.bound, lower.iterations, upper.bound, upper.iterations, sddp.lower_bound,
        sddp.iterations
    );
    println!("  reference iteration counts at protocol scale: 30 / 20 / 180");
    report(
        9,
        "protocol-scale smoke",
        lower.bound.is_finite()
            && upper.bound.is_finite()
            && sddp.lower_bound.is_finite()
            && best_lower <= upper.bound + 1e-6
            && elapsed.as_secs() < 1800,
    );
}

#[test]
fn c10_reproducible_artifacts() {
    let bin = env!("CARGO_BIN_EXE_gridmates");
    let dir = std::env::temp_dir().join(format!("gm-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let inst_path = dir.join("tiny.json");
    save_instance(&tiny_instance(), &inst_path).unwrap();

    let solve = |out: &std::path::Path, algo: &str| {
        let status = Command::new(bin)
            .args([
                "solve",
                "--instance",
                inst_path.to_str().unwrap(),
                "--algo",
                algo,
                "--seed",
                "7",
                "--grid-points",
                "5",
                "--control-points",
                "3",
                "--scenarios",
                "200",
                "--resample-k",
                "4",
                "--max-iters",
                "10",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success(), "{algo} solve failed");
    };
    let simulate = |run: &std::path::Path| {
        let status = Command::new(bin)
            .args([
                "simulate",
                "--instance",
                inst_path.to_str().unwrap(),
                "--run",
                run.to_str().unwrap(),
                "--scenarios",
                "300",
                "--seed",
                "3",
            ])
            .status()
            .unwrap();
        assert!(status.success(), "simulate failed");
    };

    let mut ok = true;
    for algo in ["dadp", "padp", "sddp"] {
        let a = dir.join(format!("{algo}-a"));
        let b = dir.join(format!("{algo}-b"));
        solve(&a, algo);
        solve(&b, algo);
        simulate(&a);
        simulate(&b);
        for file in ["summary.json", "stack.json", "simulate-summary.json", "simulation.csv"] {
            let ba = std::fs::read(a.join(file)).unwrap();
            let bb = std::fs::read(b.join(file)).unwrap();
            if ba != bb {
                println!("  {algo}/{file} differs between identical reruns");
                ok = false;
            }
        }
    }
    std::fs::remove_dir_all(&dir).ok();
    report(10, "byte-identical reruns", ok);
}
