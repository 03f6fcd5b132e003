use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use minfo_cli::RunManifest;
use serde_json::Value;

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn minfo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minfo"))
        .args(args)
        .env_remove("MINFO_WORKERS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn scalar_fixture_solvers_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (model, spec) = (fixture("scalar/model.json"), fixture("scalar/spec.json"));
    let mut objective = Vec::new();
    for solver in ["central", "admm"] {
        let out = dir.path().join(solver);
        let res = minfo(&[
            "solve-srd", s(&model), s(&spec), "--solver", solver, "--tol", "1e-6", "--out", s(&out),
        ]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
        objective.push(json(&out.join("solution.json"))["objective"].as_f64().unwrap());
        assert_eq!(header(&out.join("rates.csv")), "t,trace_P,D,rate");
        assert_eq!(data_rows(&out.join("rates.csv")), 3);
    }
    assert!((objective[0] - objective[1]).abs() <= 1e-3 * objective[0].abs(), "{objective:?}");
    assert_eq!(header(&dir.path().join("admm/residuals.csv")), "iter,pri,dual,objective");
}

#[test]
fn satellite_horizon_1500_with_restarted_acceleration() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("satellite.json");
    let res = minfo(&[
        "make-satellite",
        "--params",
        s(&fixture("satellite/params.json")),
        "--d-profile",
        s(&fixture("satellite/d_profile.csv")),
        "--horizon",
        "1500",
        "--out",
        s(&model),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let out = dir.path().join("run");
    let res = minfo(&[
        "solve-srd", s(&model), "--variant", "accelerated", "--restart", "10", "--workers", "2", "--out", s(&out),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(data_rows(&out.join("rates.csv")), 1500);
    let manifest = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.variant.as_deref(), Some("accelerated_restart_10"));
    assert_eq!(manifest.workers, 2);
}

#[test]
fn malformed_json_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"T\": 3,\n  \"n\": ,\n}\n").unwrap();
    let res = minfo(&["solve-srd", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("bad.json:3:8"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(minfo(&["solve-srd"]).status.code(), Some(1));
    assert_eq!(minfo(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(minfo(&["--help"]).status.code(), Some(0));
}

#[test]
fn iteration_limit_exits_three_with_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = minfo(&[
        "solve-srd",
        s(&fixture("scalar/model.json")),
        s(&fixture("scalar/spec.json")),
        "--max-iter",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(data_rows(&out.join("residuals.csv")), 3);
    assert_eq!(json(&out.join("solution.json"))["status"], "max_iter");
    assert_eq!(RunManifest::load(&out.join("manifest.json")).unwrap().exit_code, 3);
}

#[test]
fn rates_in_bits_scale_by_ln2() {
    let dir = tempfile::tempdir().unwrap();
    let (model, spec) = (fixture("scalar/model.json"), fixture("scalar/spec.json"));
    let mut totals = Vec::new();
    for (name, extra) in [("nats", None), ("bits", Some("--bits"))] {
        let out = dir.path().join(name);
        let mut args = vec!["solve-srd", s(&model), s(&spec), "--solver", "central", "--out", s(&out)];
        args.extend(extra);
        assert_eq!(minfo(&args).status.code(), Some(0));
        totals.push(json(&out.join("solution.json"))["total_rate"].as_f64().unwrap());
    }
    assert!((totals[0] / totals[1] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn compare_variants_writes_one_file_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (model, spec) = (fixture("scalar/model.json"), fixture("scalar/spec.json"));
    let empty = dir.path().join("zero");
    assert_eq!(
        minfo(&["compare-variants", s(&model), s(&spec), "--iters", "0", "--out", s(&empty)]).status.code(),
        Some(0)
    );
    let names = [
        "vanilla",
        "over_relaxed_1.5",
        "over_relaxed_1.6",
        "over_relaxed_1.8",
        "accelerated_restart_10",
    ];
    for name in names {
        let f = empty.join(format!("residuals_{name}.csv"));
        assert_eq!(fs::read_to_string(&f).unwrap(), "iter,pri,dual,objective\n");
    }
    let full = dir.path().join("forty");
    assert_eq!(
        minfo(&["compare-variants", s(&model), s(&spec), "--iters", "40", "--out", s(&full)]).status.code(),
        Some(0)
    );
    for name in names {
        assert_eq!(data_rows(&full.join(format!("residuals_{name}.csv"))), 40);
    }
}

#[test]
fn scaling_with_one_horizon_emits_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = minfo(&["bench-scaling", "--T-list", "20", "--iters", "5", "--repeats", "1", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = out.join("scaling.csv");
    assert_eq!(header(&csv), "T,central_ms,admm_ms");
    assert_eq!(data_rows(&csv), 1);
}

#[test]
fn central_is_skipped_above_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = minfo(&[
        "bench-scaling", "--T-list", "10,30", "--iters", "2", "--repeats", "1", "--central-cap", "10", "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(0));
    let text = fs::read_to_string(out.join("scaling.csv")).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("30,,"), "{last}");
}

#[test]
fn corridor_plan_is_feasible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan");
    let res = minfo(&[
        "plan",
        s(&fixture("corridor/scenario.json")),
        s(&fixture("corridor/model.json")),
        s(&fixture("corridor/init.csv")),
        "--alpha",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["feasible"], true);
    assert_eq!(header(&out.join("history.csv")), "iter,perception,control,penalty,var_residual");
    let traj = out.join("trajectory.csv");
    assert!(header(&traj).starts_with("t,x1,x2,u1,u2,P_1_1,P_2_1,P_1_2,P_2_2,clearance_1,"));
    assert_eq!(data_rows(&traj), 20);

    // The planned trajectory feeds straight into mc.
    let mc = dir.path().join("mc");
    let res = minfo(&[
        "mc",
        s(&traj),
        s(&fixture("corridor/model.json")),
        "--scenario",
        s(&fixture("corridor/scenario.json")),
        "--N",
        "2000",
        "--out",
        s(&mc),
    ]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(json(&mc.join("mc.json"))["N"], 2000);
}

#[test]
fn blocked_plan_exits_four_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan");
    let res = minfo(&[
        "plan",
        s(&fixture("blocked/scenario.json")),
        s(&fixture("blocked/model.json")),
        s(&fixture("blocked/init.csv")),
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(4));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("restart with a different initial trajectory"), "{err}");
    assert_eq!(json(&out.join("summary.json"))["feasible"], false);
}

fn mc_run(dir: &Path, name: &str, interval: &str, seed: &str, workers: &str) -> String {
    let out = dir.join(name);
    let res = minfo(&[
        "mc",
        s(&fixture("corridor/init.csv")),
        s(&fixture("corridor/model.json")),
        "--scenario",
        s(&fixture("corridor/scenario.json")),
        "--interval",
        interval,
        "--N",
        "5000",
        "--seed",
        seed,
        "--workers",
        workers,
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    fs::read_to_string(out.join("mc.json")).unwrap()
}

#[test]
fn mc_is_deterministic_and_zero_without_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    // A feasible corridor path never collides with exact dynamics.
    let out = dir.path().join("zero");
    let res = minfo(&[
        "mc",
        s(&fixture("corridor/init.csv")),
        s(&fixture("corridor/model.json")),
        "--scenario",
        s(&fixture("corridor/scenario.json")),
        "--interval",
        "0",
        "--N",
        "500",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(json(&out.join("mc.json"))["p"], 0.0);

    let a = mc_run(dir.path(), "a", "0.05", "3", "1");
    let b = mc_run(dir.path(), "b", "0.05", "3", "4");
    assert_eq!(a, b);
    let c = mc_run(dir.path(), "c", "0.05", "4", "1");
    assert_ne!(a, c);
}

#[test]
fn replay_reproduces_outputs_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = minfo(&[
        "solve-srd",
        s(&fixture("scalar/model.json")),
        s(&fixture("scalar/spec.json")),
        "--variant",
        "over-relaxed",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(0));
    let manifest = out.join("manifest.json");
    let again = dir.path().join("again");
    let res = minfo(&["replay", s(&manifest), "--out", s(&again)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let first = RunManifest::load(&manifest).unwrap();
    let second = RunManifest::load(&again.join("manifest.json")).unwrap();
    assert_eq!(first.config_hash, second.config_hash);

    let mut tampered = first.clone();
    tampered.outputs[0].sha256 = "0".repeat(64);
    let fake = dir.path().join("fake.json");
    tampered.save(&fake).unwrap();
    let res = minfo(&["replay", s(&fake), "--out", s(&dir.path().join("third"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("solution.json differs"));
}

#[test]
fn config_hash_tracks_options_not_output_location() {
    let dir = tempfile::tempdir().unwrap();
    let (model, spec) = (fixture("scalar/model.json"), fixture("scalar/spec.json"));
    let run = |name: &str, rho: &str| {
        let out = dir.path().join(name);
        minfo(&["solve-srd", s(&model), s(&spec), "--rho", rho, "--out", s(&out)]);
        RunManifest::load(&out.join("manifest.json")).unwrap().config_hash
    };
    assert_eq!(run("a", "1"), run("b", "1"));
    assert_ne!(run("a", "1"), run("c", "2"));
}

#[test]
fn workers_default_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = Command::new(env!("CARGO_BIN_EXE_minfo"))
        .args([
            "solve-srd",
            s(&fixture("scalar/model.json")),
            s(&fixture("scalar/spec.json")),
            "--out",
            s(&out),
        ])
        .env("MINFO_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(RunManifest::load(&out.join("manifest.json")).unwrap().workers, 3);
}

#[test]
fn short_budget_profile_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let res = minfo(&[
        "make-satellite",
        "--params",
        s(&fixture("satellite/params.json")),
        "--d-profile",
        s(&fixture("satellite/d_profile.csv")),
        "--horizon",
        "5000",
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(res.status.code(), Some(1));
}
