mod common;

use common::{random_instance, scalar_grid_oracle};
use minfo_core::admm::{self, AdmmConfig};
use minfo_core::central::{solve_srd, BarrierOptions, SrdOptions};
use minfo_core::model::{parse_problem, DistortionSpec, SystemModel};
use minfo_core::SymMat;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Vanilla ADMM: the accelerated variant adds `μ(‖Q‖² + ‖R‖² + ‖S‖²)` to
/// the objective and so converges to a slightly different point.
fn admm_tight() -> AdmmConfig {
    AdmmConfig {
        eps_pri: 1e-6,
        eps_dual: 1e-6,
        max_iter: 20_000,
        ..Default::default()
    }
}

fn scalar(a: f64, w: f64, p0: f64, d: Vec<f64>) -> (SystemModel, DistortionSpec) {
    let t = d.len();
    let model = SystemModel::time_invariant(
        t,
        DMatrix::from_element(1, 1, a),
        DMatrix::zeros(1, 1),
        SymMat::from_diagonal(&[w]),
        SymMat::from_diagonal(&[p0]),
    );
    let spec = DistortionSpec {
        theta: vec![SymMat::identity(1); t],
        d,
        gamma: None,
    };
    (model, spec)
}

#[test]
fn grid_oracle_matches_greedy_schedule() {
    // Every stage cost decreases in p and every constraint caps p from
    // above, so the largest feasible p at each step is optimal.
    let (model, spec) = scalar(1.1, 0.4, 1.0, vec![0.6, 2.0, 0.3, 5.0]);
    let mut p = Vec::new();
    let mut prior = 1.0;
    for k in 0..4 {
        let pk = f64::min(prior, spec.d[k]);
        p.push(pk);
        prior = 1.21 * pk + 0.4;
    }
    let exact: f64 = (0..3).map(|k| -(p[k] * 0.4 / (1.21 * p[k] + 0.4)).ln()).sum::<f64>() - p[3].ln();
    let grid = scalar_grid_oracle(&model, &spec, 400_000);
    assert!(grid >= exact - 1e-12);
    assert!(grid - exact < 1e-3, "grid {grid} exact {exact}");
}

#[test]
fn scalar_instances_match_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let t = rng.random_range(2..9);
        let d = (0..t).map(|_| rng.random_range(0.1..1.5)).collect();
        let (model, spec) = scalar(rng.random_range(0.5..1.3), rng.random_range(0.05..0.8), 1.0, d);
        let oracle = scalar_grid_oracle(&model, &spec, 400_000);
        let central = solve_srd(&model, &spec, SrdOptions::default(), &BarrierOptions::default()).unwrap();
        let admm = admm::run(&model, &spec, &admm_tight()).unwrap();
        assert!((central.objective - oracle).abs() < 1e-3, "central {} oracle {oracle}", central.objective);
        assert!(
            (admm.solution.objective - oracle).abs() < 1e-3,
            "admm {} oracle {oracle}",
            admm.solution.objective
        );
    }
}

#[test]
fn bundled_scalar_fixture_agrees_across_solvers() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/scalar");
    let mut model: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{dir}/model.json")).unwrap()).unwrap();
    let spec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{dir}/spec.json")).unwrap()).unwrap();
    model.as_object_mut().unwrap().extend(spec.as_object().unwrap().clone());
    let (model, spec) = parse_problem(&model.to_string()).unwrap();
    let oracle = scalar_grid_oracle(&model, &spec, 400_000);
    let central = solve_srd(&model, &spec, SrdOptions::default(), &BarrierOptions::default()).unwrap();
    let admm = admm::run(&model, &spec, &admm_tight()).unwrap();
    assert!((central.objective - oracle).abs() < 1e-3);
    assert!((admm.solution.objective - central.objective).abs() <= 1e-3 * central.objective.abs());
}

#[test]
fn admm_matches_central_on_random_matrix_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..6 {
        let n = rng.random_range(1..=3);
        let t = rng.random_range(2..=15);
        let (model, spec) = random_instance(&mut rng, n, t);
        let central = solve_srd(&model, &spec, SrdOptions::default(), &BarrierOptions::default()).unwrap();
        let admm = admm::run(&model, &spec, &admm_tight()).unwrap();
        let rel = (admm.solution.objective - central.objective).abs() / central.objective.abs().max(1.0);
        assert!(rel < 1e-3, "n={n} T={t}: admm {} central {}", admm.solution.objective, central.objective);
    }
}
