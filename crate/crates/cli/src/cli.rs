use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use minfo_core::Variant;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "minfo", version, about = "Minimum-information sensing, control and planning runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Solve an SRD program with the barrier method or ADMM.
    SolveSrd(SolveSrdArgs),
    /// Time both solvers over a list of horizons.
    BenchScaling(BenchScalingArgs),
    /// Residual histories of every ADMM variant on one problem.
    CompareVariants(CompareVariantsArgs),
    /// Covariance-aware path smoothing by penalty CCP.
    Plan(PlanArgs),
    /// Monte Carlo robustness of a planned trajectory under perturbed dynamics.
    Mc(McArgs),
    /// Write the satellite problem file from parameters and a budget profile.
    MakeSatellite(MakeSatelliteArgs),
    /// Re-run a recorded command and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Central,
    Admm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Vanilla,
    OverRelaxed,
    Accelerated,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SolveSrdArgs {
    /// Problem JSON (model, optionally with Theta and D).
    #[serde(skip)]
    pub model: PathBuf,
    /// Distortion JSON merged over the model file.
    #[serde(skip)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SolverKind::Admm)]
    pub solver: SolverKind,
    #[arg(long, value_enum, default_value_t = VariantKind::Vanilla)]
    pub variant: VariantKind,
    /// Relaxation factor for the over-relaxed variant.
    #[arg(long, default_value_t = 1.6)]
    pub gamma: f64,
    /// Restart period for the accelerated variant.
    #[arg(long, default_value_t = 10)]
    pub restart: usize,
    /// Strong-convexity weight for the accelerated variant.
    #[arg(long, default_value_t = 1e-3)]
    pub mu_strong: f64,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Stopping tolerance; defaults to 1e-4 for ADMM residuals and 1e-8
    /// for the barrier gap.
    #[arg(long)]
    pub tol: Option<f64>,
    /// ADMM iterations, or Newton steps per barrier stage.
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, env = "MINFO_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report rates in bits instead of nats.
    #[arg(long)]
    pub bits: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl SolveSrdArgs {
    pub fn variant(&self) -> Variant {
        variant_of(self.variant, self.gamma, self.restart, self.mu_strong)
    }
}

pub fn variant_of(kind: VariantKind, gamma: f64, restart: usize, mu_strong: f64) -> Variant {
    match kind {
        VariantKind::Vanilla => Variant::Vanilla,
        VariantKind::OverRelaxed => Variant::over_relaxed(gamma),
        VariantKind::Accelerated => Variant::Accelerated {
            restart_period: restart,
            mu_strong,
        },
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BenchScalingArgs {
    /// Comma-separated horizons.
    #[arg(long = "T-list", value_delimiter = ',', required = true)]
    pub t_list: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// ADMM iterations timed per horizon.
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    /// Timings are the median over this many repeats.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// The barrier solver is skipped above this horizon.
    #[arg(long, default_value_t = 400)]
    pub central_cap: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "MINFO_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CompareVariantsArgs {
    #[serde(skip)]
    pub model: PathBuf,
    #[serde(skip)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1.5, 1.6, 1.8])]
    pub gammas: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub restart: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub mu_strong: f64,
    #[arg(long, env = "MINFO_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PlanArgs {
    #[serde(skip)]
    pub scenario: PathBuf,
    /// Problem JSON with the dynamics, Theta and D.
    #[serde(skip)]
    pub model: PathBuf,
    /// Initial path CSV with columns x1.., u1...
    #[serde(skip)]
    pub init: PathBuf,
    /// Overrides the scenario's alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub ccp_iters: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct McArgs {
    /// Trajectory CSV; only the x and u columns are read.
    #[serde(skip)]
    pub traj: PathBuf,
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub scenario: PathBuf,
    /// Width of the uniform perturbation of each entry of A.
    #[arg(long, default_value_t = 1e-2)]
    pub interval: f64,
    #[arg(long = "N", default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "MINFO_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct MakeSatelliteArgs {
    /// Parameter JSON: omega0, inertia, dt, sigma_b, horizon, optional P0 and Theta.
    #[arg(long)]
    pub params: PathBuf,
    /// CSV with columns t,D.
    #[arg(long)]
    pub d_profile: PathBuf,
    /// Overrides the horizon in the parameter file.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Output problem JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Output directory for the re-run; defaults to the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn absolutize(path: &mut PathBuf, base: &Path) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SolveSrd(_) => "solve-srd",
            Command::BenchScaling(_) => "bench-scaling",
            Command::CompareVariants(_) => "compare-variants",
            Command::Plan(_) => "plan",
            Command::Mc(_) => "mc",
            Command::MakeSatellite(_) => "make-satellite",
            Command::Replay(_) => "replay",
        }
    }

    /// Resolves relative paths against `base`.
    pub fn absolutize(&mut self, base: &Path) {
        match self {
            Command::SolveSrd(a) => {
                absolutize(&mut a.model, base);
                if let Some(s) = a.spec.as_mut() {
                    absolutize(s, base);
                }
                absolutize(&mut a.out, base);
            }
            Command::BenchScaling(a) => absolutize(&mut a.out, base),
            Command::CompareVariants(a) => {
                absolutize(&mut a.model, base);
                if let Some(s) = a.spec.as_mut() {
                    absolutize(s, base);
                }
                absolutize(&mut a.out, base);
            }
            Command::Plan(a) => {
                for p in [&mut a.scenario, &mut a.model, &mut a.init, &mut a.out] {
                    absolutize(p, base);
                }
            }
            Command::Mc(a) => {
                for p in [&mut a.traj, &mut a.model, &mut a.scenario, &mut a.out] {
                    absolutize(p, base);
                }
            }
            Command::MakeSatellite(a) => {
                for p in [&mut a.params, &mut a.d_profile, &mut a.out] {
                    absolutize(p, base);
                }
            }
            Command::Replay(a) => {
                absolutize(&mut a.manifest, base);
                if let Some(o) = a.out.as_mut() {
                    absolutize(o, base);
                }
            }
        }
    }

    /// Replaces the output location, for commands that record a manifest.
    pub fn set_out(&mut self, out: PathBuf) -> bool {
        match self {
            Command::SolveSrd(a) => a.out = out,
            Command::BenchScaling(a) => a.out = out,
            Command::CompareVariants(a) => a.out = out,
            Command::Plan(a) => a.out = out,
            Command::Mc(a) => a.out = out,
            Command::MakeSatellite(_) | Command::Replay(_) => return false,
        }
        true
    }
}
