//! Optimal linear sensor reconstruction, per-step information rates, the
//! time-varying Kalman filter and closed-loop Monte-Carlo simulation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::central::SrdSolution;
use crate::error::{Error, Result};
use crate::matcore::{cholesky_factor, chol_logdet, eigh, spd_inverse, GenMat, SymMat};
use crate::model::SystemModel;
use crate::riccati::{ControllerSynthesis, LqgWeights};

/// `y_t = C_t x_t + v_t`, `v_t ~ N(0, V_t)`. A step with `ranks[t] == 0`
/// takes no measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorDesign {
    pub c: Vec<GenMat>,
    pub v: Vec<SymMat>,
    pub ranks: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct SensorOptions {
    /// Eigenvalues of the SNR matrix below `rank_tol · max(1, λ_max)` are dropped.
    pub rank_tol: f64,
    /// Negative eigenvalues below `−neg_tol · max(1, ‖P_{t|t}⁻¹‖)` are an error.
    pub neg_tol: f64,
}

impl Default for SensorOptions {
    fn default() -> Self {
        SensorOptions {
            rank_tol: 1e-8,
            neg_tol: 1e-6,
        }
    }
}

/// Prior covariances `P_{t|t−1}` induced by the posterior schedule, with
/// `P_{1|0} = P0`.
pub fn priors(sol: &SrdSolution, model: &SystemModel) -> Vec<SymMat> {
    let mut out = Vec::with_capacity(sol.p.len());
    out.push(model.p0.clone());
    for k in 1..sol.p.len() {
        out.push(sol.p[k - 1].congruence(&model.a[k - 1]) + &model.w[k - 1]);
    }
    out
}

pub fn reconstruct_sensor(sol: &SrdSolution, model: &SystemModel) -> Result<SensorDesign> {
    reconstruct_sensor_with(sol, model, SensorOptions::default())
}

/// Factors `Ω_t = P_{t|t}⁻¹ − P_{t|t−1}⁻¹` as `C_tᵀ C_t` with `V_t = I`.
pub fn reconstruct_sensor_with(
    sol: &SrdSolution,
    model: &SystemModel,
    opts: SensorOptions,
) -> Result<SensorDesign> {
    let n = model.n();
    let mut design = SensorDesign {
        c: Vec::new(),
        v: Vec::new(),
        ranks: Vec::new(),
    };
    for (k, prior) in priors(sol, model).iter().enumerate() {
        let post_inv = spd_inverse(&sol.p[k])?;
        let omega = &post_inv - &spd_inverse(prior)?;
        let (vals, vecs) = eigh(&omega);
        let lmax = vals[n - 1].max(0.0);
        let scale = post_inv.matrix().norm().max(1.0);
        if vals[0] < -opts.neg_tol * scale {
            return Err(Error::NotImplementable {
                t: k + 1,
                min_eig: vals[0],
            });
        }
        let cut = opts.rank_tol * lmax.max(1.0);
        let keep: Vec<usize> = (0..n).filter(|&i| vals[i] > cut).collect();
        let mut c = DMatrix::zeros(keep.len(), n);
        for (row, &i) in keep.iter().enumerate() {
            let s = vals[i].sqrt();
            for j in 0..n {
                c[(row, j)] = s * vecs[(j, i)];
            }
        }
        design.ranks.push(keep.len());
        design.v.push(SymMat::identity(keep.len().max(1)));
        design.c.push(c);
    }
    Ok(design)
}

/// Per-step rates `R_t = ½(logdet P_{t|t−1} − logdet P_{t|t})` in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct RateSchedule {
    pub per_step: Vec<f64>,
    pub total: f64,
}

impl RateSchedule {
    pub fn in_bits(&self) -> RateSchedule {
        let k = std::f64::consts::LN_2;
        RateSchedule {
            per_step: self.per_step.iter().map(|r| r / k).collect(),
            total: self.total / k,
        }
    }
}

/// Per-step rates. A step whose SNR matrix has no eigenvalue above the
/// sensor rank cut takes no measurement and gets a rate of exactly zero, so
/// zero rates and zero-rank sensors coincide.
pub fn rate_schedule(sol: &SrdSolution, model: &SystemModel) -> Result<RateSchedule> {
    let opts = SensorOptions::default();
    let mut per_step = Vec::with_capacity(sol.p.len());
    for (k, prior) in priors(sol, model).iter().enumerate() {
        let omega = &spd_inverse(&sol.p[k])? - &spd_inverse(prior)?;
        let (vals, _) = eigh(&omega);
        let cut = opts.rank_tol * vals[vals.len() - 1].max(1.0);
        let measured = vals.iter().any(|&v| v > cut);
        let r = 0.5 * (chol_logdet(prior)? - chol_logdet(&sol.p[k])?);
        per_step.push(if measured { r.max(0.0) } else { 0.0 });
    }
    let total = per_step.iter().sum();
    Ok(RateSchedule { per_step, total })
}

/// Conditional means `z_t = E[x_t | y(t)]` and posterior covariances.
#[derive(Clone, Debug)]
pub struct FilterOutput {
    pub z: Vec<DVector<f64>>,
    pub p: Vec<SymMat>,
}

/// Predict/update recursion from `x_1 ~ N(0, P0)`. `u` supplies the inputs
/// `u_1 … u_{T−1}` when the loop is closed; `None` means zero input.
pub fn kalman_filter(
    model: &SystemModel,
    sensor: &SensorDesign,
    y: &[DVector<f64>],
    u: Option<&[DVector<f64>]>,
) -> Result<FilterOutput> {
    let t_len = model.horizon;
    let n = model.n();
    if y.len() != t_len || sensor.c.len() != t_len {
        return Err(Error::DimensionMismatch(format!(
            "{} measurements and {} sensor steps for horizon {t_len}",
            y.len(),
            sensor.c.len()
        )));
    }
    let mut z = DVector::zeros(n);
    let mut p = model.p0.clone();
    let mut out = FilterOutput {
        z: Vec::with_capacity(t_len),
        p: Vec::with_capacity(t_len),
    };
    for k in 0..t_len {
        let (zk, pk) = measurement_update(&z, &p, &sensor.c[k], &sensor.v[k], &y[k], sensor.ranks[k])?;
        out.z.push(zk.clone());
        out.p.push(pk.clone());
        if k + 1 < t_len {
            z = &model.a[k] * zk;
            if let Some(u) = u {
                z += &model.b[k] * &u[k];
            }
            p = pk.congruence(&model.a[k]) + &model.w[k];
        }
    }
    Ok(out)
}

fn measurement_update(
    z: &DVector<f64>,
    p: &SymMat,
    c: &GenMat,
    v: &SymMat,
    y: &DVector<f64>,
    rank: usize,
) -> Result<(DVector<f64>, SymMat)> {
    if rank == 0 {
        return Ok((z.clone(), p.clone()));
    }
    if y.len() != rank || c.nrows() != rank {
        return Err(Error::DimensionMismatch(format!(
            "measurement has {} entries, sensor rank {rank}",
            y.len()
        )));
    }
    let pct = p.matrix() * c.transpose();
    let s = SymMat::from_matrix(c * &pct + v.matrix());
    let chol = s.into_matrix().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let gain = chol.solve(&pct.transpose()).transpose();
    let innov = y - c * z;
    let z_new = z + &gain * innov;
    // Joseph form keeps the update symmetric positive definite.
    let n = p.dim();
    let ikc = DMatrix::identity(n, n) - &gain * c;
    let p_new = &ikc * p.matrix() * ikc.transpose() + &gain * v.matrix() * gain.transpose();
    Ok((z_new, SymMat::from_matrix(p_new)))
}

/// One closed-loop realization: states `x_1 … x_T`, inputs `u_1 … u_{T−1}`.
#[derive(Clone, Debug)]
pub struct Trial {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

/// Per-step sample means and standard errors.
#[derive(Clone, Debug)]
pub struct StepStatistics {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

impl StepStatistics {
    /// Mean and standard error of a per-step functional across trials.
    pub fn from_samples(samples: &[Vec<f64>]) -> Self {
        let n = samples.len() as f64;
        let steps = samples.first().map(|s| s.len()).unwrap_or(0);
        let mut mean = vec![0.0; steps];
        let mut se = vec![0.0; steps];
        for k in 0..steps {
            let m = samples.iter().map(|s| s[k]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            mean[k] = m;
            se[k] = (var / n).sqrt();
        }
        StepStatistics { mean, se }
    }
}

/// Runs the sensor → Kalman filter → `u_t = K_t z_t` loop `n_trials` times.
/// Trial `i` draws from `ChaCha8Rng` seeded with `seed` on stream `i`, so
/// results do not depend on the worker count.
pub fn simulate_trials(
    model: &SystemModel,
    sensor: &SensorDesign,
    gains: &ControllerSynthesis,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    let t_len = model.horizon;
    if sensor.c.len() != t_len || gains.k.len() + 1 != t_len {
        return Err(Error::DimensionMismatch("sensor or gains do not cover the horizon".into()));
    }
    let p0_chol = cholesky_factor(&model.p0)?;
    let w_chol = model
        .w
        .iter()
        .map(cholesky_factor)
        .collect::<Result<Vec<_>>>()?;
    let v_chol = sensor
        .v
        .iter()
        .map(cholesky_factor)
        .collect::<Result<Vec<_>>>()?;
    (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            one_trial(model, sensor, gains, &p0_chol, &w_chol, &v_chol, &mut rng)
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, chol: &DMatrix<f64>) -> DVector<f64> {
    let e = DVector::from_fn(chol.nrows(), |_, _| StandardNormal.sample(rng));
    chol * e
}

fn one_trial(
    model: &SystemModel,
    sensor: &SensorDesign,
    gains: &ControllerSynthesis,
    p0_chol: &DMatrix<f64>,
    w_chol: &[DMatrix<f64>],
    v_chol: &[DMatrix<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<Trial> {
    let t_len = model.horizon;
    let mut x = gaussian(rng, p0_chol);
    let mut z = DVector::zeros(model.n());
    let mut p = model.p0.clone();
    let mut trial = Trial {
        x: Vec::with_capacity(t_len),
        u: Vec::with_capacity(t_len - 1),
    };
    for k in 0..t_len {
        let rank = sensor.ranks[k];
        let y = if rank > 0 {
            &sensor.c[k] * &x + gaussian(rng, &v_chol[k]).rows(0, rank)
        } else {
            DVector::zeros(0)
        };
        let (zk, pk) = measurement_update(&z, &p, &sensor.c[k], &sensor.v[k], &y, rank)?;
        trial.x.push(x.clone());
        if k + 1 < t_len {
            let u = &gains.k[k] * &zk;
            x = &model.a[k] * &x + &model.b[k] * &u + gaussian(rng, &w_chol[k]);
            z = &model.a[k] * &zk + &model.b[k] * &u;
            p = pk.congruence(&model.a[k]) + &model.w[k];
            trial.u.push(u);
        }
    }
    Ok(trial)
}

/// Per-step stage costs `x_tᵀ Q_t x_t + u_tᵀ R_t u_t` (no input at `T`).
pub fn stage_costs(trial: &Trial, weights: &LqgWeights) -> Vec<f64> {
    trial
        .x
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let mut c = (x.transpose() * weights.q[k].matrix() * x)[(0, 0)];
            if let Some(u) = trial.u.get(k) {
                c += (u.transpose() * weights.r[k].matrix() * u)[(0, 0)];
            }
            c
        })
        .collect()
}

/// Monte-Carlo mean and standard error of `‖x_t‖² + ‖u_t‖²` per step.
pub fn simulate_closed_loop(
    model: &SystemModel,
    sensor: &SensorDesign,
    gains: &ControllerSynthesis,
    n_trials: usize,
    seed: u64,
) -> Result<StepStatistics> {
    let trials = simulate_trials(model, sensor, gains, n_trials, seed)?;
    let weights = LqgWeights::identity(model.horizon, model.n(), model.m());
    let samples: Vec<Vec<f64>> = trials.iter().map(|t| stage_costs(t, &weights)).collect();
    Ok(StepStatistics::from_samples(&samples))
}
