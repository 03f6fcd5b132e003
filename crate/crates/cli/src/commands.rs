use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use minfo_core::admm::{self, init_state, iterate};
use minfo_core::central::{solve_srd, BarrierOptions, SrdOptions};
use minfo_core::matcore::{gen_to_rows, SymMat};
use minfo_core::model::{satellite_model, synthetic_instance, MatSeq, ProblemFile, SatelliteParams, ScalarSeq};
use minfo_core::planner::{ccp_solve, check_feasible, monte_carlo_robustness, CcpOptions, CcpOutcome, Trajectory};
use minfo_core::sensor::rate_schedule;
use minfo_core::{AdmmConfig, Error, Variant};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::cli::*;
use crate::error::*;
use crate::io::*;
use crate::manifest::{config_hash, FileDigest, RunManifest};

/// Collects what a command did so it can be written as a manifest.
struct Recorder {
    command: &'static str,
    args: Vec<String>,
    cwd: PathBuf,
    inputs: Vec<FileDigest>,
    config: Value,
    seed: Option<u64>,
    variant: Option<String>,
    workers: usize,
    timings_ms: BTreeMap<String, f64>,
}

impl Recorder {
    fn new<C: serde::Serialize>(ctx: &Context, command: &'static str, config: &C, inputs: &[&Path]) -> CliResult<Self> {
        Ok(Recorder {
            command,
            args: ctx.args.clone(),
            cwd: ctx.cwd.clone(),
            inputs: inputs.iter().map(|p| FileDigest::of(p)).collect::<CliResult<_>>()?,
            config: serde_json::to_value(config).map_err(|e| CliError::parse(e.to_string()))?,
            seed: None,
            variant: None,
            workers: 1,
            timings_ms: BTreeMap::new(),
        })
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.timings_ms.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64() * 1e3;
        out
    }

    fn finish(self, dir: &Path, outputs: &[PathBuf], exit_code: i32) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: self.args,
            cwd: self.cwd,
            config_hash: config_hash(self.command, &self.config, &self.inputs),
            inputs: self.inputs,
            config: self.config,
            seed: self.seed,
            variant: self.variant,
            workers: self.workers,
            timings_ms: self.timings_ms,
            outputs: outputs.iter().map(|p| FileDigest::of(p)).collect::<CliResult<_>>()?,
            exit_code,
        };
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

/// Invocation context recorded in manifests.
pub struct Context {
    pub args: Vec<String>,
    pub cwd: PathBuf,
}

pub fn execute(command: Command, ctx: &Context) -> CliResult<i32> {
    match command {
        Command::SolveSrd(a) => solve_srd_cmd(&a, ctx),
        Command::BenchScaling(a) => bench_scaling_cmd(&a, ctx),
        Command::CompareVariants(a) => compare_variants_cmd(&a, ctx),
        Command::Plan(a) => plan_cmd(&a, ctx),
        Command::Mc(a) => mc_cmd(&a, ctx),
        Command::MakeSatellite(a) => make_satellite_cmd(&a),
        Command::Replay(a) => replay_cmd(&a),
    }
}

fn check_workers(workers: usize) -> CliResult<()> {
    if workers == 0 {
        return Err(CliError::parse("--workers must be at least 1"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// solve-srd

fn solve_srd_cmd(a: &SolveSrdArgs, ctx: &Context) -> CliResult<i32> {
    check_workers(a.workers)?;
    let inputs: Vec<&Path> = std::iter::once(a.model.as_path()).chain(a.spec.as_deref()).collect();
    let mut rec = Recorder::new(ctx, "solve-srd", a, &inputs)?;
    rec.seed = Some(a.seed);
    rec.workers = a.workers;
    let (model, spec) = rec.time("load", || load_problem(&a.model, a.spec.as_deref()))?;
    fs::create_dir_all(&a.out)?;

    let mut outputs = Vec::new();
    let (sol, status, iterations) = match a.solver {
        SolverKind::Central => {
            rec.variant = Some("central".into());
            let mut opts = BarrierOptions::default();
            if let Some(tol) = a.tol {
                opts.tol = tol;
            }
            if let Some(k) = a.max_iter {
                opts.max_newton_per_stage = k;
            }
            let sol = rec.time("solve", || solve_srd(&model, &spec, SrdOptions::default(), &opts))?;
            (sol, "converged", None)
        }
        SolverKind::Admm => {
            let variant = a.variant();
            rec.variant = Some(variant.name());
            let defaults = AdmmConfig::default();
            let tol = a.tol.unwrap_or(defaults.eps_pri);
            let config = AdmmConfig {
                rho: a.rho,
                max_iter: a.max_iter.unwrap_or(defaults.max_iter),
                eps_pri: tol,
                eps_dual: tol,
                variant,
                workers: a.workers,
                seed: a.seed,
            };
            config.check()?;
            let outcome = rec.time("solve", || admm::run(&model, &spec, &config))?;
            let path = a.out.join("residuals.csv");
            let (header, rows) = residual_rows(&outcome.history);
            write_csv(&path, &header, &rows)?;
            outputs.push(path);
            let status = if outcome.converged() { "converged" } else { "max_iter" };
            (outcome.solution, status, Some(outcome.history.len()))
        }
    };

    let sol = sol.with_rates(&model)?;
    let mut rates = rate_schedule(&sol, &model)?;
    if a.bits {
        rates = rates.in_bits();
    }
    let mut doc = sol.to_json();
    doc["rates"] = json!(rates.per_step);
    doc["total_rate"] = json!(rates.total);
    doc["rate_unit"] = json!(if a.bits { "bits" } else { "nats" });
    doc["solver"] = serde_json::to_value(a.solver).unwrap_or(Value::Null);
    doc["variant"] = json!(rec.variant);
    doc["status"] = json!(status);
    doc["iterations"] = json!(iterations);
    let path = a.out.join("solution.json");
    write_json(&path, &doc)?;
    outputs.insert(0, path);
    let path = a.out.join("rates.csv");
    write_rates(&path, &sol.p, &spec.d, &rates.per_step)?;
    outputs.push(path);

    let code = if status == "converged" { EXIT_OK } else { EXIT_MAX_ITER };
    rec.finish(&a.out, &outputs, code)?;
    println!(
        "objective {:.10e}  status {status}{}",
        sol.objective,
        iterations.map_or(String::new(), |k| format!("  iterations {k}"))
    );
    if code == EXIT_MAX_ITER {
        eprintln!("warning: ADMM stopped at the iteration limit before reaching the tolerance");
    }
    Ok(code)
}

// ---------------------------------------------------------------------------
// bench-scaling

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub horizon: usize,
    pub central_ms: Option<f64>,
    pub admm_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Wall time of `iters` ADMM iterations (initialization excluded) and of
/// a full barrier solve, each the median over `repeats` runs.
pub fn scaling_study(a: &BenchScalingArgs) -> CliResult<Vec<ScalingRow>> {
    if a.repeats == 0 {
        return Err(CliError::parse("--repeats must be at least 1"));
    }
    let mut rows = Vec::with_capacity(a.t_list.len());
    for &t in &a.t_list {
        let (model, spec) = synthetic_instance(a.n, t, a.seed)?;
        let config = AdmmConfig {
            rho: a.rho,
            workers: a.workers,
            seed: a.seed,
            ..Default::default()
        };
        config.check()?;
        let pool = admm::build_pool(a.workers)?;
        let mut admm_ms = Vec::with_capacity(a.repeats);
        for _ in 0..a.repeats {
            let mut state = init_state(&model, &spec, &config)?;
            let start = Instant::now();
            for _ in 0..a.iters {
                iterate(&mut state, &model, &spec, &config, pool.as_ref())?;
            }
            admm_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let central_ms = if t <= a.central_cap {
            let mut times = Vec::with_capacity(a.repeats);
            for _ in 0..a.repeats {
                let start = Instant::now();
                solve_srd(&model, &spec, SrdOptions::default(), &BarrierOptions::default())?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            Some(median(times))
        } else {
            None
        };
        rows.push(ScalingRow {
            horizon: t,
            central_ms,
            admm_ms: median(admm_ms),
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn bench_scaling_cmd(a: &BenchScalingArgs, ctx: &Context) -> CliResult<i32> {
    check_workers(a.workers)?;
    let mut rec = Recorder::new(ctx, "bench-scaling", a, &[])?;
    rec.seed = Some(a.seed);
    rec.workers = a.workers;
    let rows = rec.time("study", || scaling_study(a))?;
    fs::create_dir_all(&a.out)?;
    let header = ["T", "central_ms", "admm_ms"].map(String::from).to_vec();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.horizon.to_string(),
                r.central_ms.map_or(String::new(), |v| format!("{v:.3}")),
                format!("{:.3}", r.admm_ms),
            ]
        })
        .collect();
    let path = a.out.join("scaling.csv");
    write_csv(&path, &header, &table)?;
    rec.finish(&a.out, &[path], EXIT_OK)?;
    for r in &rows {
        println!(
            "T {:>6}  central_ms {:>12}  admm_ms {:>10.3}",
            r.horizon,
            r.central_ms.map_or("-".to_string(), |v| format!("{v:.3}")),
            r.admm_ms
        );
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// compare-variants

fn compare_variants_cmd(a: &CompareVariantsArgs, ctx: &Context) -> CliResult<i32> {
    check_workers(a.workers)?;
    let inputs: Vec<&Path> = std::iter::once(a.model.as_path()).chain(a.spec.as_deref()).collect();
    let mut rec = Recorder::new(ctx, "compare-variants", a, &inputs)?;
    rec.workers = a.workers;
    let (model, spec) = load_problem(&a.model, a.spec.as_deref())?;
    fs::create_dir_all(&a.out)?;

    let mut variants = vec![Variant::Vanilla];
    variants.extend(a.gammas.iter().map(|&g| Variant::over_relaxed(g)));
    variants.push(Variant::Accelerated {
        restart_period: a.restart,
        mu_strong: a.mu_strong,
    });
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    for variant in variants {
        let config = AdmmConfig {
            rho: a.rho,
            variant,
            workers: a.workers,
            ..Default::default()
        };
        config.check()?;
        let name = variant.name();
        let state = rec.time(&name, || admm::run_fixed(&model, &spec, &config, a.iters))?;
        let (header, rows) = residual_rows(&state.history);
        let path = a.out.join(format!("residuals_{name}.csv"));
        write_csv(&path, &header, &rows)?;
        outputs.push(path);
        let last = state.history.last();
        println!(
            "{name:<28} pri {:>10}  dual {:>10}  objective {}",
            last.map_or("-".into(), |r| format!("{:.3e}", r.pri)),
            last.map_or("-".into(), |r| format!("{:.3e}", r.dual)),
            last.map_or("-".into(), |r| format!("{:.10e}", r.objective)),
        );
        summary.insert(
            name,
            json!({
                "iterations": state.history.len(),
                "pri": last.map(|r| r.pri),
                "dual": last.map(|r| r.dual),
                "objective": last.map(|r| r.objective),
            }),
        );
    }
    let path = a.out.join("summary.json");
    write_json(&path, &Value::Object(summary))?;
    outputs.push(path);
    rec.finish(&a.out, &outputs, EXIT_OK)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// plan

fn write_plan_outputs(dir: &Path, outcome: &CcpOutcome, obstacles: &[nalgebra::DVector<f64>]) -> CliResult<Vec<PathBuf>> {
    let traj_path = dir.join("trajectory.csv");
    write_trajectory(&traj_path, &outcome.trajectory, obstacles)?;
    let header = ["iter", "perception", "control", "penalty", "var_residual"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = outcome
        .history
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                num(r.perception),
                num(r.control),
                num(r.penalty),
                num(r.var_residual),
            ]
        })
        .collect();
    let hist_path = dir.join("history.csv");
    write_csv(&hist_path, &header, &rows)?;
    Ok(vec![traj_path, hist_path])
}

fn plan_cmd(a: &PlanArgs, ctx: &Context) -> CliResult<i32> {
    let mut rec = Recorder::new(ctx, "plan", a, &[&a.scenario, &a.model, &a.init])?;
    let mut scenario = load_scenario(&a.scenario)?;
    if let Some(alpha) = a.alpha {
        scenario = scenario.with_alpha(alpha);
    }
    let (model, spec) = load_problem(&a.model, None)?;
    let (x, u) = read_path_csv(&a.init, model.n(), model.m())?;
    let init = Trajectory::from_path(&model, &spec, x, u)?;
    fs::create_dir_all(&a.out)?;
    let opts = CcpOptions {
        max_iter: a.ccp_iters,
        ..Default::default()
    };
    let obstacles = scenario.obstacle_points();
    let (outcome, code, failure) = match rec.time("ccp", || ccp_solve(&scenario, &model, &spec, &init, &opts)) {
        Ok(outcome) => (outcome, EXIT_OK, None),
        Err(err @ Error::ConvergedInfeasible { .. }) => {
            let msg = err.to_string();
            match err {
                Error::ConvergedInfeasible { best, .. } => (*best, EXIT_CCP_INFEASIBLE, Some(msg)),
                _ => unreachable!(),
            }
        }
        Err(e) => return Err(e.into()),
    };
    let mut outputs = write_plan_outputs(&a.out, &outcome, &obstacles)?;
    let traj = &outcome.trajectory;
    let check = check_feasible(traj, &scenario, &model)?;
    let summary = json!({
        "alpha": scenario.alpha,
        "converged": outcome.converged,
        "feasible": check.feasible,
        "clearance_margin": check.clearance_margin,
        "tau": outcome.tau,
        "iterations": outcome.history.len().saturating_sub(1),
        "perception": traj.perception_cost()?,
        "control": traj.control_cost(),
        "obstacle_points": obstacles.len(),
    });
    let path = a.out.join("summary.json");
    write_json(&path, &summary)?;
    outputs.push(path);
    rec.finish(&a.out, &outputs, code)?;
    println!(
        "alpha {}  perception {:.6}  control {:.6}  feasible {}  converged {}",
        scenario.alpha,
        summary["perception"].as_f64().unwrap_or(f64::NAN),
        traj.control_cost(),
        check.feasible,
        outcome.converged
    );
    if let Some(msg) = failure {
        eprintln!("error: {msg}");
    }
    Ok(code)
}

// ---------------------------------------------------------------------------
// mc

fn mc_cmd(a: &McArgs, ctx: &Context) -> CliResult<i32> {
    check_workers(a.workers)?;
    let mut rec = Recorder::new(ctx, "mc", a, &[&a.traj, &a.model, &a.scenario])?;
    rec.seed = Some(a.seed);
    rec.workers = a.workers;
    let (model, _) = load_problem(&a.model, None)?;
    let scenario = load_scenario(&a.scenario)?;
    let (x, u) = read_path_csv(&a.traj, model.n(), model.m())?;
    if x.len() != model.horizon {
        return Err(CliError::parse(format!(
            "{}: {} rows for horizon {}",
            a.traj.display(),
            x.len(),
            model.horizon
        )));
    }
    let traj = Trajectory {
        p: vec![model.p0.clone(); x.len()],
        pi: Vec::new(),
        slacks: Vec::new(),
        x,
        u,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers)
        .build()
        .map_err(|e| CliError::parse(format!("cannot start worker pool: {e}")))?;
    let res = rec.time("mc", || {
        pool.install(|| monte_carlo_robustness(&traj, &model, &scenario, a.interval, a.samples, a.seed))
    })?;
    fs::create_dir_all(&a.out)?;
    let doc = json!({
        "p": res.p,
        "ci_low": res.ci_low,
        "ci_high": res.ci_high,
        "se": res.se,
        "N": res.n,
        "infeasible": res.infeasible,
        "seed": res.seed,
        "interval": a.interval,
    });
    let path = a.out.join("mc.json");
    write_json(&path, &doc)?;
    rec.finish(&a.out, &[path], EXIT_OK)?;
    println!("{doc}");
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// make-satellite

#[derive(Deserialize)]
struct SatelliteFile {
    #[serde(flatten)]
    params: SatelliteParams,
    #[serde(rename = "P0")]
    p0: Option<Vec<Vec<f64>>>,
    #[serde(rename = "Theta")]
    theta: Option<Vec<Vec<f64>>>,
}

fn read_profile(path: &Path) -> CliResult<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h.trim() == "D")
        .ok_or_else(|| CliError::parse(format!("{}: missing column D", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let s = rec.get(col).unwrap_or("").trim();
        out.push(
            s.parse::<f64>()
                .map_err(|_| CliError::parse(format!("{}:{line}: bad number {s:?}", path.display())))?,
        );
    }
    Ok(out)
}

fn make_satellite_cmd(a: &MakeSatelliteArgs) -> CliResult<i32> {
    let file: SatelliteFile = serde_json::from_value(read_json(&a.params)?)
        .map_err(|e| CliError::parse(format!("{}: {e}", a.params.display())))?;
    let mut params = file.params;
    if let Some(t) = a.horizon {
        params.horizon = t;
    }
    let p0 = match &file.p0 {
        Some(rows) => SymMat::from_rows(rows)?,
        None => SymMat::identity(3),
    };
    let theta = match &file.theta {
        Some(rows) => SymMat::from_rows(rows)?,
        None => SymMat::identity(3),
    };
    let model = satellite_model(&params, p0)?;
    let profile = read_profile(&a.d_profile)?;
    if profile.len() < params.horizon {
        return Err(CliError::parse(format!(
            "{}: {} budget rows for horizon {}",
            a.d_profile.display(),
            profile.len(),
            params.horizon
        )));
    }
    let file = ProblemFile {
        horizon: params.horizon,
        n: 3,
        m: 1,
        a: MatSeq::Single(gen_to_rows(&model.a[0])),
        b: MatSeq::Single(gen_to_rows(&model.b[0])),
        w: MatSeq::Single(model.w[0].to_rows()),
        p0: model.p0.to_rows(),
        theta: MatSeq::Single(theta.to_rows()),
        d: ScalarSeq::PerStep(profile[..params.horizon].to_vec()),
        gamma: None,
    };
    // Validate before writing.
    file.into_model()?;
    let value = serde_json::to_value(&file).map_err(|e| CliError::parse(e.to_string()))?;
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    write_json(&a.out, &value)?;
    println!("wrote {} (T = {})", a.out.display(), params.horizon);
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// replay

fn replay_cmd(a: &ReplayArgs) -> CliResult<i32> {
    use clap::Parser;
    let recorded = RunManifest::load(&a.manifest)?;
    let argv = std::iter::once("minfo".to_string()).chain(recorded.args.iter().cloned());
    let mut command = Cli::try_parse_from(argv)
        .map_err(|e| CliError::parse(format!("{}: recorded arguments do not parse: {e}", a.manifest.display())))?
        .command;
    command.absolutize(&recorded.cwd);
    let out_dir = match &a.out {
        Some(out) => out.clone(),
        None => recorded
            .outputs
            .first()
            .and_then(|o| o.path.parent())
            .map(Path::to_path_buf)
            .ok_or_else(|| CliError::parse("manifest lists no outputs"))?,
    };
    if !command.set_out(out_dir.clone()) {
        return Err(CliError::parse(format!("{} runs cannot be replayed", command.name())));
    }
    let ctx = Context {
        args: recorded.args.clone(),
        cwd: recorded.cwd.clone(),
    };
    let code = execute(command, &ctx)?;
    let fresh = RunManifest::load(&out_dir.join("manifest.json"))?;
    let mut mismatches = Vec::new();
    if fresh.config_hash != recorded.config_hash {
        mismatches.push("config hash".to_string());
    }
    if code != recorded.exit_code {
        mismatches.push(format!("exit code {code} (recorded {})", recorded.exit_code));
    }
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let fresh_outputs: BTreeMap<String, &str> =
        fresh.outputs.iter().map(|o| (name(&o.path), o.sha256.as_str())).collect();
    for o in &recorded.outputs {
        let file = name(&o.path);
        match fresh_outputs.get(&file) {
            Some(h) if *h == o.sha256 => {}
            Some(_) => mismatches.push(format!("{file} differs")),
            None => mismatches.push(format!("{file} missing")),
        }
    }
    if mismatches.is_empty() {
        println!("replay matches: {} outputs identical", recorded.outputs.len());
        Ok(EXIT_OK)
    } else {
        Err(CliError::parse(format!("replay mismatch: {}", mismatches.join(", "))))
    }
}
