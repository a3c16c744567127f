mod common;

use netfuse::admm::{self, step3_dual, AdmmOptions, AdmmProblem};
use netfuse::model::{ParamDims, ParamState};
use netfuse::penalty::{objective, PenaltyConfig};
use netfuse::projection::build_plan;

use common::{connected_graph, rng, small_panel};

fn setup(seed: u64) -> (netfuse::data::RentalPanel, netfuse::graph::ProximityGraph) {
    let dims = ParamDims::new(5, 4, 3);
    let panel = small_panel(seed, dims, 15, 10, -1.0, 0.4);
    let graph = connected_graph(&mut rng(seed), 5, 0.3);
    (panel, graph)
}

#[test]
fn residuals_trend_down() {
    let (panel, graph) = setup(1);
    let plan = build_plan::<f64>(&graph, ParamDims::of_panel(&panel)).unwrap();
    let cfg = PenaltyConfig::new(0.5, 2.0, 0.5);
    let out = admm::solve(&panel, &plan, &cfg, &AdmmOptions::default(), None, None).unwrap();
    assert!(out.report.converged);
    let h = &out.state.history;
    assert!(h.len() >= 20, "only {} iterations", h.len());
    let w = 10;
    let mean = |s: &[netfuse::admm::Residuals]| s.iter().map(|r| r.primal + r.dual).sum::<f64>() / s.len() as f64;
    assert!(mean(&h[h.len() - w..]) < 0.1 * mean(&h[..w]));
    assert!(h.last().unwrap().converged());
}

#[test]
fn warm_and_cold_starts_reach_the_same_objective() {
    let (panel, graph) = setup(2);
    let plan = build_plan::<f64>(&graph, ParamDims::of_panel(&panel)).unwrap();
    let opts = AdmmOptions::default();
    let strong = PenaltyConfig::new(2.0, 5.0, 1.0);
    let weak = PenaltyConfig::new(0.5, 1.0, 0.3);
    let first = admm::solve(&panel, &plan, &strong, &opts, None, None).unwrap();
    let warm = admm::solve(&panel, &plan, &weak, &opts, Some(&first.state), None).unwrap();
    let cold = admm::solve(&panel, &plan, &weak, &opts, None, None).unwrap();
    assert!(warm.report.converged && cold.report.converged);
    let (a, b) = (warm.report.objective, cold.report.objective);
    assert!((a - b).abs() <= 1e-5 * b.abs(), "warm {a} cold {b}");
}

#[test]
fn solve_reports_objective_of_returned_estimate() {
    let (panel, graph) = setup(3);
    let plan = build_plan::<f64>(&graph, ParamDims::of_panel(&panel)).unwrap();
    let cfg = PenaltyConfig::new(1.0, 1.0, 1.0);
    let mut log = Vec::new();
    let out = admm::solve(&panel, &plan, &cfg, &AdmmOptions::default(), None, Some(&mut log)).unwrap();
    let f = objective(&out.params, &panel, &graph, &cfg).unwrap();
    assert_eq!(f, out.report.objective);
    // The fit improves on the cold start.
    let problem = AdmmProblem::new(&panel, &plan).unwrap();
    let start = problem.cold_state(1.0).params;
    assert!(f < objective(&start, &panel, &graph, &cfg).unwrap());
    let lines: Vec<serde_json::Value> =
        String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.last().unwrap()["iteration"], out.report.iterations);
}

/// The public step functions compose into the same iterates as `solve`
/// with fixed ρ.
#[test]
fn manual_steps_match_solve() {
    let (panel, graph) = setup(4);
    let plan = build_plan::<f64>(&graph, ParamDims::of_panel(&panel)).unwrap();
    let cfg = PenaltyConfig::new(0.7, 1.5, 0.4);
    let opts = AdmmOptions { adapt_rho: false, max_iter: 25, eps_abs: 1e-300, eps_rel: 1e-300, ..Default::default() };
    let problem = AdmmProblem::new(&panel, &plan).unwrap();
    let out = problem.solve(&cfg, &opts, None, None).unwrap();
    let mut state = problem.cold_state(cfg.rho);
    for _ in 0..25 {
        problem.step1_primal(&mut state, &cfg, &opts).unwrap();
        problem.step2_project(&mut state).unwrap();
        step3_dual(&mut state);
    }
    assert_eq!(state.z, out.state.z);
    assert_eq!(state.params, out.state.params);
    assert!(!out.report.converged);
}

#[test]
fn iteration_cap_is_reported_as_not_converged() {
    let (panel, graph) = setup(5);
    let plan = build_plan::<f64>(&graph, ParamDims::of_panel(&panel)).unwrap();
    let opts = AdmmOptions { max_iter: 2, ..Default::default() };
    let out = admm::solve(&panel, &plan, &PenaltyConfig::new(1.0, 3.0, 1.0), &opts, None, None).unwrap();
    assert!(!out.report.converged);
    assert_eq!(out.report.iterations, 2);
    assert!(out.params.validate().is_ok());
}

#[test]
fn invalid_inputs_are_rejected() {
    let (panel, graph) = setup(6);
    let plan = build_plan::<f64>(&graph, ParamDims::of_panel(&panel)).unwrap();
    let bad = AdmmOptions { eps_abs: 0.0, ..Default::default() };
    assert!(admm::solve(&panel, &plan, &PenaltyConfig::default(), &bad, None, None).is_err());
    let cfg = PenaltyConfig { rho: -1.0, ..Default::default() };
    assert!(admm::solve(&panel, &plan, &cfg, &AdmmOptions::default(), None, None).is_err());
    let other = build_plan::<f64>(&connected_graph(&mut rng(1), 4, 0.5), ParamDims::new(4, 4, 3)).unwrap();
    assert!(AdmmProblem::new(&panel, &other).is_err());
}

#[test]
fn single_precision_solve_tracks_double() {
    let (panel, graph) = setup(7);
    let dims = ParamDims::of_panel(&panel);
    let cfg = PenaltyConfig::new(1.0, 1.0, 0.5);
    let opts = AdmmOptions { eps_abs: 1e-4, eps_rel: 1e-3, ..Default::default() };
    let p64 = admm::solve(&panel, &build_plan::<f64>(&graph, dims).unwrap(), &cfg, &opts, None, None).unwrap();
    let p32 = admm::solve(&panel, &build_plan::<f32>(&graph, dims).unwrap(), &cfg, &opts, None, None).unwrap();
    let back: ParamState<f64> = p32.params.cast();
    let f64_obj = objective(&back, &panel, &graph, &cfg).unwrap();
    assert!((f64_obj - p64.report.objective).abs() <= 1e-3 * p64.report.objective.abs());
}
