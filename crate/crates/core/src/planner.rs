//! Minimum-sensing path smoothing with a penalty convex-concave procedure.
//!
//! Decision variables are the mean path `x_t`, inputs `u_t`, posterior
//! covariances `P_t` with their log-det companions `Π_t`, and (while the
//! current trajectory is infeasible) one slack per step and obstacle point.
//! The only nonconvex constraint is the clearance
//! `h(x_t, P_t, o) = (x_t − o)ᵀ P_t⁻¹ (x_t − o) ≥ χ²`; `h` is jointly convex,
//! so its tangent plane is a global under-estimator and every subproblem
//! solution with zero slacks is feasible for the original problem.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::central::{
    add_srd_block, interior_start, objective_of, schur_pi, solve_barrier, BarrierOptions, ConicProgram,
    Label, LinearForm, SrdOptions, SrdVars, VarId, START_SHRINK,
};
use crate::error::{Error, Result};
use crate::matcore::{is_positive_definite, min_eigenvalue, SymMat};
use crate::model::{validate, DistortionSpec, SystemModel};

/// Confidence level covering `prob` of a Gaussian in `dim` dimensions.
pub fn chi2_quantile(dim: usize, prob: f64) -> f64 {
    ChiSquared::new(dim as f64)
        .expect("dimension is positive")
        .inverse_cdf(prob)
}

fn default_density() -> f64 {
    4.0
}
fn default_tau0() -> f64 {
    1.0
}
fn default_mu() -> f64 {
    5.0
}
fn default_tau_max() -> f64 {
    1e5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Point obstacles.
    #[serde(default)]
    pub obstacles: Vec<Vec<f64>>,
    /// Planar polygon obstacles; their boundaries are sampled into points at
    /// `density` points per unit length.
    #[serde(default)]
    pub regions: Vec<Vec<[f64; 2]>>,
    #[serde(default = "default_density")]
    pub density: f64,
    /// Physical radius around point obstacles used by the Monte-Carlo
    /// collision test.
    #[serde(default)]
    pub collision_radius: f64,
    /// Defaults to the 90% quantile of χ² with `n` degrees of freedom.
    #[serde(default)]
    pub chi2: Option<f64>,
    pub alpha: f64,
    /// `[lo, hi]` per input coordinate, shared by every step.
    pub u_box: Vec<[f64; 2]>,
    /// `[lo, hi]` per state coordinate, shared by every step.
    pub x_box: Vec<[f64; 2]>,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_tau_max")]
    pub tau_max: f64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Scenario {
            alpha,
            ..self.clone()
        }
    }

    pub fn chi2(&self) -> f64 {
        self.chi2
            .unwrap_or_else(|| chi2_quantile(self.start.len().max(1), 0.9))
    }

    /// Point obstacles followed by sampled region boundaries.
    pub fn obstacle_points(&self) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self
            .obstacles
            .iter()
            .map(|o| DVector::from_column_slice(o))
            .collect();
        for poly in &self.regions {
            for (i, a) in poly.iter().enumerate() {
                let b = poly[(i + 1) % poly.len()];
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                let pieces = ((len * self.density).ceil() as usize).max(1);
                for k in 0..pieces {
                    let s = k as f64 / pieces as f64;
                    out.push(DVector::from_vec(vec![
                        a[0] + s * (b[0] - a[0]),
                        a[1] + s * (b[1] - a[1]),
                    ]));
                }
            }
        }
        out
    }

    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(msg));
        let (n, m) = (model.n(), model.m());
        if !(self.chi2() > 0.0) {
            return bad(format!("chi2 must be positive, got {}", self.chi2()));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.tau0 > 0.0 && self.tau0 <= self.tau_max) {
            return bad("need 0 < tau0 <= tau_max".into());
        }
        if !(self.mu > 1.0) {
            return bad(format!("mu must exceed 1, got {}", self.mu));
        }
        if self.x_box.len() != n || self.start.len() != n || self.goal.len() != n {
            return bad(format!("state boxes and endpoints must have dimension {n}"));
        }
        if self.u_box.len() != m {
            return bad(format!("input box must have dimension {m}"));
        }
        if self.x_box.iter().chain(&self.u_box).any(|b| !(b[0] < b[1])) {
            return bad("every box needs lo < hi".into());
        }
        for (name, p) in [("start", &self.start), ("goal", &self.goal)] {
            if p.iter().zip(&self.x_box).any(|(v, b)| !(*v > b[0] && *v < b[1])) {
                return bad(format!("{name} must lie strictly inside x_box"));
            }
        }
        if self.obstacles.iter().any(|o| o.len() != n) {
            return bad(format!("obstacle points must have dimension {n}"));
        }
        if !self.regions.is_empty() && n != 2 {
            return bad("polygon regions need a planar state".into());
        }
        if self.regions.iter().any(|r| r.len() < 3) {
            return bad("a region needs at least three vertices".into());
        }
        if !(self.density > 0.0) || self.collision_radius < 0.0 {
            return bad("density must be positive and collision_radius nonnegative".into());
        }
        Ok(())
    }

    /// Physical collision: outside the state box, inside a region, or within
    /// `collision_radius` of a point obstacle.
    pub fn collides(&self, x: &DVector<f64>) -> bool {
        if x.iter().zip(&self.x_box).any(|(v, b)| *v < b[0] || *v > b[1]) {
            return true;
        }
        if self.regions.iter().any(|poly| point_in_polygon([x[0], x[1]], poly)) {
            return true;
        }
        self.obstacles.iter().any(|o| {
            let d2: f64 = o.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            d2 < self.collision_radius * self.collision_radius
        })
    }
}

/// Even-odd ray casting.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub p: Vec<SymMat>,
    pub pi: Vec<SymMat>,
    /// `slacks[t][o]`; all zero when the slacks were pinned.
    pub slacks: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Wraps a mean path with a covariance schedule strictly inside the SRD
    /// constraints: a constant shrunken `P0` when that is compatible with the
    /// dynamics, otherwise the forward-propagated interior point.
    pub fn from_path(
        model: &SystemModel,
        spec: &DistortionSpec,
        x: Vec<DVector<f64>>,
        u: Vec<DVector<f64>>,
    ) -> Result<Self> {
        validate(model, spec).into_result()?;
        let t_len = model.horizon;
        if x.len() != t_len || u.len() + 1 != t_len {
            return Err(Error::DimensionMismatch(format!(
                "path has {} states and {} inputs for horizon {t_len}",
                x.len(),
                u.len()
            )));
        }
        let c = (1.0 - START_SHRINK)
            * spec
                .d
                .iter()
                .zip(&spec.theta)
                .map(|(d, th)| d / th.dot(&model.p0))
                .fold(1.0, f64::min);
        let flat = model.p0.scale(c);
        let flat_ok = (0..t_len - 1).all(|k| {
            min_eigenvalue(&(flat.congruence(&model.a[k]) + &model.w[k] - &flat)) > 0.0
        });
        let p = if flat_ok {
            vec![flat; t_len]
        } else {
            interior_start(model, spec, START_SHRINK)
        };
        let pi = strict_pi(model, &p)?;
        Ok(Trajectory {
            x,
            u,
            p,
            pi,
            slacks: Vec::new(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.x.len()
    }

    /// `−Σ logdet Π_t`.
    pub fn perception_cost(&self) -> Result<f64> {
        objective_of(&self.pi)
    }

    /// `Σ ‖u_t‖²`.
    pub fn control_cost(&self) -> f64 {
        self.u.iter().map(|u| u.norm_squared()).sum()
    }

    pub fn max_slack(&self) -> f64 {
        self.slacks.iter().flatten().fold(0.0, |m, &s| m.max(s))
    }

    pub fn dynamics_residual(&self, model: &SystemModel) -> f64 {
        (0..self.horizon() - 1)
            .map(|k| (&self.x[k + 1] - &model.a[k] * &self.x[k] - &model.b[k] * &self.u[k]).amax())
            .fold(0.0, f64::max)
    }

    /// `√(Σ ‖x_t − x'_t‖² + Σ ‖P_t − P'_t‖²_F)`.
    pub fn distance(&self, other: &Trajectory) -> f64 {
        let dx: f64 = self.x.iter().zip(&other.x).map(|(a, b)| (a - b).norm_squared()).sum();
        let dp: f64 = self.p.iter().zip(&other.p).map(|(a, b)| (a - b).frob_norm_sq()).sum();
        (dx + dp).sqrt()
    }
}

/// `Π_t` a little inside its LMI bound so the start is strictly feasible.
fn strict_pi(model: &SystemModel, p: &[SymMat]) -> Result<Vec<SymMat>> {
    let t_len = p.len();
    p.iter()
        .enumerate()
        .map(|(k, pk)| {
            if k + 1 < t_len {
                Ok(schur_pi(pk, &model.a[k], &model.w[k])?.scale(1.0 - START_SHRINK))
            } else {
                Ok(pk.clone())
            }
        })
        .collect()
}

/// `(x − o)ᵀ P⁻¹ (x − o)`.
pub fn clearance(x: &DVector<f64>, p: &SymMat, obs: &DVector<f64>) -> Result<f64> {
    let chol = p.matrix().clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let d = x - obs;
    Ok(d.dot(&chol.solve(&d)))
}

/// Tangent plane of `h` at `(x̂, P̂)`:
/// `h̄(x, P) = h(x̂, P̂) + gₓᵀ(x − x̂) + ⟨G_P, P − P̂⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    pub h0: f64,
    pub gx: DVector<f64>,
    pub gp: SymMat,
    pub x_hat: DVector<f64>,
    pub p_hat: SymMat,
}

impl Linearization {
    pub fn eval(&self, x: &DVector<f64>, p: &SymMat) -> f64 {
        self.h0 + self.gx.dot(&(x - &self.x_hat)) + self.gp.dot(&(p - &self.p_hat))
    }
}

/// `gₓ = 2P̂⁻¹(x̂ − o)`, `G_P = −P̂⁻¹(x̂ − o)(x̂ − o)ᵀP̂⁻¹`.
pub fn linearize_clearance(x_hat: &DVector<f64>, p_hat: &SymMat, obs: &DVector<f64>) -> Result<Linearization> {
    let chol = p_hat
        .matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    let d = x_hat - obs;
    let v = chol.solve(&d);
    Ok(Linearization {
        h0: d.dot(&v),
        gx: &v * 2.0,
        gp: SymMat::from_matrix(-(&v * v.transpose())),
        x_hat: x_hat.clone(),
        p_hat: p_hat.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilityCheck {
    /// `min h − χ²` over steps and obstacle points.
    pub clearance_margin: f64,
    /// `(t, obstacle index)` of the minimum, both zero-based.
    pub worst: Option<(usize, usize)>,
    /// Smallest distance inside the state and input boxes (negative outside).
    pub box_margin: f64,
    pub dynamics_residual: f64,
    /// Largest endpoint deviation from start and goal.
    pub endpoint_error: f64,
    pub max_slack: f64,
    pub feasible: bool,
}

pub fn check_feasible(traj: &Trajectory, scenario: &Scenario, model: &SystemModel) -> Result<FeasibilityCheck> {
    let chi2 = scenario.chi2();
    let obstacles = scenario.obstacle_points();
    let mut clearance_margin = f64::INFINITY;
    let mut worst = None;
    for (t, (x, p)) in traj.x.iter().zip(&traj.p).enumerate() {
        for (o, obs) in obstacles.iter().enumerate() {
            let m = clearance(x, p, obs)? - chi2;
            if m < clearance_margin {
                clearance_margin = m;
                worst = Some((t, o));
            }
        }
    }
    let margin = |v: &DVector<f64>, b: &[[f64; 2]]| {
        v.iter()
            .zip(b)
            .map(|(x, b)| (x - b[0]).min(b[1] - x))
            .fold(f64::INFINITY, f64::min)
    };
    let box_margin = traj
        .x
        .iter()
        .map(|x| margin(x, &scenario.x_box))
        .chain(traj.u.iter().map(|u| margin(u, &scenario.u_box)))
        .fold(f64::INFINITY, f64::min);
    let start = DVector::from_column_slice(&scenario.start);
    let goal = DVector::from_column_slice(&scenario.goal);
    let endpoint_error = (&traj.x[0] - start).amax().max((&traj.x[traj.horizon() - 1] - goal).amax());
    let dynamics_residual = traj.dynamics_residual(model);
    let max_slack = traj.max_slack();
    let feasible = max_slack < 1e-8
        && clearance_margin >= -1e-6
        && box_margin >= -1e-9
        && dynamics_residual <= 1e-8
        && endpoint_error <= 1e-8;
    Ok(FeasibilityCheck {
        clearance_margin,
        worst,
        box_margin,
        dynamics_residual,
        endpoint_error,
        max_slack,
        feasible,
    })
}

/// A CCP subproblem and the handles needed to read its solution back.
pub struct CcpProgram {
    pub program: ConicProgram,
    pub srd: SrdVars,
    pub x: Vec<VarId>,
    pub u: Vec<VarId>,
    /// One coordinate per `(t, obstacle)`, step-major; absent when pinned.
    pub slack: Option<VarId>,
    pub obstacles: Vec<DVector<f64>>,
    pub chi2: f64,
}

/// Convexified problem around `hat`: SRD block, boxes, dynamics, endpoints
/// and one linearized clearance row per `(t, obstacle)`, each with its own
/// slack unless `with_slacks` is false.
pub fn build_ccp_subproblem(
    hat: &Trajectory,
    scenario: &Scenario,
    model: &SystemModel,
    spec: &DistortionSpec,
    tau: f64,
    with_slacks: bool,
) -> Result<CcpProgram> {
    scenario.validate(model)?;
    if hat.p.iter().any(|p| !is_positive_definite(p)) {
        return Err(Error::NotPositiveDefinite);
    }
    let t_len = model.horizon;
    let (n, m) = (model.n(), model.m());
    let chi2 = scenario.chi2();
    let obstacles = scenario.obstacle_points();
    let mut prog = ConicProgram::new();
    let srd = add_srd_block(&mut prog, model, spec, SrdOptions::default());
    let x: Vec<VarId> = (1..=t_len).map(|t| prog.add_vector(&format!("x_{t}"), n)).collect();
    let u: Vec<VarId> = (1..t_len).map(|t| prog.add_vector(&format!("u_{t}"), m)).collect();
    let slack = (with_slacks && !obstacles.is_empty())
        .then(|| prog.add_vector("m", t_len * obstacles.len()));

    for var in &u {
        for i in 0..m {
            let c = prog.vec_coord(*var, i);
            prog.add_quadratic(c, c, 1.0 / scenario.alpha);
        }
    }
    for (k, var) in u.iter().enumerate() {
        for (i, b) in scenario.u_box.iter().enumerate() {
            let c = prog.vec_coord(*var, i);
            let mut lo = LinearForm::new(-b[0]);
            lo.add(c, 1.0);
            prog.add_inequality(Label::new("u_box", Some(k + 1)), lo);
            let mut hi = LinearForm::new(b[1]);
            hi.add(c, -1.0);
            prog.add_inequality(Label::new("u_box", Some(k + 1)), hi);
        }
    }
    // The endpoints are pinned, so only interior states carry box rows.
    for k in 1..t_len.saturating_sub(1) {
        for (i, b) in scenario.x_box.iter().enumerate() {
            let c = prog.vec_coord(x[k], i);
            let mut lo = LinearForm::new(-b[0]);
            lo.add(c, 1.0);
            prog.add_inequality(Label::new("x_box", Some(k + 1)), lo);
            let mut hi = LinearForm::new(b[1]);
            hi.add(c, -1.0);
            prog.add_inequality(Label::new("x_box", Some(k + 1)), hi);
        }
    }
    for (label, k, point) in [("start", 0, &scenario.start), ("goal", t_len - 1, &scenario.goal)] {
        for (i, v) in point.iter().enumerate() {
            let mut e = LinearForm::new(-v);
            e.add(prog.vec_coord(x[k], i), 1.0);
            prog.add_equality(Label::new(label, Some(k + 1)), e);
        }
    }
    for k in 0..t_len - 1 {
        // x_{t+1} − A x_t − B u_t = 0
        for i in 0..n {
            let mut e = LinearForm::new(0.0);
            e.add(prog.vec_coord(x[k + 1], i), 1.0);
            for j in 0..n {
                e.add(prog.vec_coord(x[k], j), -model.a[k][(i, j)]);
            }
            for j in 0..m {
                e.add(prog.vec_coord(u[k], j), -model.b[k][(i, j)]);
            }
            prog.add_equality(Label::new("dynamics", Some(k + 1)), e);
        }
    }
    for k in 0..t_len {
        for (o, obs) in obstacles.iter().enumerate() {
            let lin = linearize_clearance(&hat.x[k], &hat.p[k], obs)?;
            // h̄(x, P) − χ² + m ≥ 0
            let constant = lin.h0 - lin.gx.dot(&lin.x_hat) - lin.gp.dot(&lin.p_hat) - chi2;
            let mut row = LinearForm::new(constant);
            for i in 0..n {
                row.add(prog.vec_coord(x[k], i), lin.gx[i]);
            }
            row.add_sym_inner(&prog, srd.p[k], &lin.gp, 1.0);
            if let Some(s) = slack {
                row.add(prog.vec_coord(s, k * obstacles.len() + o), 1.0);
            }
            prog.add_inequality(Label::new("clearance", Some(k + 1)), row);
        }
    }
    if let Some(s) = slack {
        for i in 0..t_len * obstacles.len() {
            let c = prog.vec_coord(s, i);
            prog.add_linear(c, tau);
            let mut g = LinearForm::new(0.0);
            g.add(c, 1.0);
            prog.add_inequality(Label::new("slack", Some(i / obstacles.len() + 1)), g);
        }
    }
    Ok(CcpProgram {
        program: prog,
        srd,
        x,
        u,
        slack,
        obstacles,
        chi2,
    })
}

impl CcpProgram {
    /// Start point at the expansion trajectory; slacks sit one unit above
    /// the current violation.
    pub fn start_point(&self, hat: &Trajectory) -> Result<DVector<f64>> {
        let prog = &self.program;
        let mut v = DVector::zeros(prog.n_coords);
        for k in 0..hat.horizon() {
            prog.set_sym(&mut v, self.srd.p[k], &hat.p[k]);
            prog.set_sym(&mut v, self.srd.pi[k], &hat.pi[k]);
            prog.set_vector(&mut v, self.x[k], &hat.x[k]);
        }
        for (k, var) in self.u.iter().enumerate() {
            prog.set_vector(&mut v, *var, &hat.u[k]);
        }
        if let Some(s) = self.slack {
            let n_obs = self.obstacles.len();
            for k in 0..hat.horizon() {
                for (o, obs) in self.obstacles.iter().enumerate() {
                    let viol = (self.chi2 - clearance(&hat.x[k], &hat.p[k], obs)?).max(0.0);
                    v[prog.vec_coord(s, k * n_obs + o)] = viol + 1.0;
                }
            }
        }
        Ok(v)
    }

    pub fn extract(&self, v: &DVector<f64>) -> Trajectory {
        let prog = &self.program;
        let t_len = self.x.len();
        let n_obs = self.obstacles.len();
        let slacks = (0..t_len)
            .map(|k| {
                (0..n_obs)
                    .map(|o| self.slack.map_or(0.0, |s| v[prog.vec_coord(s, k * n_obs + o)].max(0.0)))
                    .collect()
            })
            .collect();
        Trajectory {
            x: self.x.iter().map(|&var| prog.vector_value(v, var)).collect(),
            u: self.u.iter().map(|&var| prog.vector_value(v, var)).collect(),
            p: self.srd.p.iter().map(|&var| prog.sym_value(v, var)).collect(),
            pi: self.srd.pi.iter().map(|&var| prog.sym_value(v, var)).collect(),
            slacks,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CcpOptions {
    pub max_iter: usize,
    /// Stop once the penalized objective changes by less than
    /// `tol · max(1, |F|)` at a fixed penalty with zero slacks.
    pub tol: f64,
    pub barrier: BarrierOptions,
}

impl Default for CcpOptions {
    fn default() -> Self {
        CcpOptions {
            max_iter: 50,
            tol: 1e-9,
            // Thousands of clearance rows make centering slow after each
            // warm start, so stages get a larger Newton budget.
            barrier: BarrierOptions {
                tol: 1e-10,
                max_newton_per_stage: 1000,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CcpRecord {
    pub iter: usize,
    pub perception: f64,
    /// `Σ ‖u_t‖²`, without the `1/α` weight.
    pub control: f64,
    /// `τ Σ max(0, χ² − h)`.
    pub penalty: f64,
    pub tau: f64,
    pub max_slack: f64,
    pub feasible: bool,
    /// Distance to the previous iterate.
    pub step: f64,
    /// Distance to the returned iterate.
    pub var_residual: f64,
}

#[derive(Clone, Debug)]
pub struct CcpOutcome {
    pub trajectory: Trajectory,
    /// Entry 0 describes the initial trajectory.
    pub history: Vec<CcpRecord>,
    pub iterates: Vec<Trajectory>,
    pub tau: f64,
    pub converged: bool,
}

struct Objective {
    perception: f64,
    control: f64,
    violation: f64,
    max_violation: f64,
}

impl Objective {
    fn of(traj: &Trajectory, obstacles: &[DVector<f64>], chi2: f64) -> Result<Self> {
        let (mut violation, mut max_violation) = (0.0, 0.0_f64);
        for (x, p) in traj.x.iter().zip(&traj.p) {
            for obs in obstacles {
                let v = (chi2 - clearance(x, p, obs)?).max(0.0);
                violation += v;
                max_violation = max_violation.max(v);
            }
        }
        Ok(Objective {
            perception: traj.perception_cost()?,
            control: traj.control_cost(),
            violation,
            max_violation,
        })
    }

    /// Raw clearance tolerance matches [`check_feasible`].
    fn infeasible(&self, traj: &Trajectory) -> bool {
        traj.max_slack() > 1e-8 || self.max_violation > 1e-6
    }

    fn penalized(&self, alpha: f64, tau: f64) -> f64 {
        self.perception + self.control / alpha + tau * self.violation
    }
}

fn strictly_clear(traj: &Trajectory, obstacles: &[DVector<f64>], chi2: f64) -> Result<bool> {
    for (x, p) in traj.x.iter().zip(&traj.p) {
        for obs in obstacles {
            if clearance(x, p, obs)? <= chi2 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Penalty CCP from `init`.
///
/// Each iteration linearizes the clearance at the current trajectory and
/// solves the convex subproblem. A solution is accepted only if it does not
/// increase the true penalized objective
/// `−Σ logdet Π + (1/α) Σ ‖u‖² + τ Σ max(0, χ² − h)`, which makes that
/// objective monotone at fixed `τ` regardless of solver roundoff. `τ`
/// grows by `μ` (up to `tau_max`) after any iteration that leaves a slack
/// above `1e-8`. Once the current trajectory clears every obstacle strictly,
/// slacks are dropped and every later iterate stays feasible.
pub fn ccp_solve(
    scenario: &Scenario,
    model: &SystemModel,
    spec: &DistortionSpec,
    init: &Trajectory,
    opts: &CcpOptions,
) -> Result<CcpOutcome> {
    scenario.validate(model)?;
    validate(model, spec).into_result()?;
    if init.horizon() != model.horizon || init.u.len() + 1 != model.horizon || init.p.len() != model.horizon {
        return Err(Error::DimensionMismatch("initial trajectory does not match the horizon".into()));
    }
    if init.dynamics_residual(model) > 1e-6 {
        return Err(Error::InvalidScenario("initial trajectory violates the dynamics".into()));
    }
    let chi2 = scenario.chi2();
    let obstacles = scenario.obstacle_points();
    let mut tau = scenario.tau0;
    let mut cur = init.clone();
    cur.slacks = vec![vec![0.0; obstacles.len()]; model.horizon];
    let mut obj = Objective::of(&cur, &obstacles, chi2)?;
    let mut pinned = strictly_clear(&cur, &obstacles, chi2)?;
    let record = |iter: usize, traj: &Trajectory, obj: &Objective, tau: f64, step: f64| -> Result<CcpRecord> {
        let check = check_feasible(traj, scenario, model)?;
        Ok(CcpRecord {
            iter,
            perception: obj.perception,
            control: obj.control,
            penalty: tau * obj.violation,
            tau,
            max_slack: traj.max_slack(),
            feasible: check.feasible,
            step,
            var_residual: f64::NAN,
        })
    };
    let mut history = vec![record(0, &cur, &obj, tau, 0.0)?];
    let mut iterates = vec![cur.clone()];
    let mut converged = false;

    for iter in 1..=opts.max_iter {
        let sub = build_ccp_subproblem(&cur, scenario, model, spec, tau, !pinned)?;
        let start = sub.start_point(&cur)?;
        let sol = solve_barrier(&sub.program, Some(&start), &opts.barrier)?;
        let next = sub.extract(&sol.x);
        let next_obj = Objective::of(&next, &obstacles, chi2)?;
        let f_cur = obj.penalized(scenario.alpha, tau);
        let f_next = next_obj.penalized(scenario.alpha, tau);
        let accepted = f_next <= f_cur;
        let step = if accepted { next.distance(&cur) } else { 0.0 };
        if accepted {
            cur = next;
            obj = next_obj;
        }
        let infeasible = obj.infeasible(&cur);
        let tau_before = tau;
        if infeasible {
            tau = (tau * scenario.mu).min(scenario.tau_max);
        }
        history.push(record(iter, &cur, &obj, tau_before, step)?);
        iterates.push(cur.clone());
        if !pinned && strictly_clear(&cur, &obstacles, chi2)? {
            pinned = true;
            cur.slacks.iter_mut().flatten().for_each(|s| *s = 0.0);
        }
        let settled = !accepted || (f_cur - f_next).abs() <= opts.tol * f_next.abs().max(1.0);
        if obstacles.is_empty() {
            // Without obstacles the subproblem is the exact problem.
            converged = true;
            break;
        }
        if settled && tau == tau_before {
            if infeasible {
                return Err(Error::ConvergedInfeasible {
                    max_slack: cur.max_slack().max(obj.violation),
                    tau,
                    best: Box::new(finish(cur, history, iterates, tau, false)),
                });
            }
            converged = true;
            break;
        }
    }
    if obj.infeasible(&cur) {
        return Err(Error::ConvergedInfeasible {
            max_slack: cur.max_slack().max(obj.violation),
            tau,
            best: Box::new(finish(cur, history, iterates, tau, false)),
        });
    }
    Ok(finish(cur, history, iterates, tau, converged))
}

fn finish(
    traj: Trajectory,
    mut history: Vec<CcpRecord>,
    iterates: Vec<Trajectory>,
    tau: f64,
    converged: bool,
) -> CcpOutcome {
    for (rec, it) in history.iter_mut().zip(&iterates) {
        rec.var_residual = it.distance(&traj);
    }
    CcpOutcome {
        trajectory: traj,
        history,
        iterates,
        tau,
        converged,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McResult {
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub se: f64,
    pub n: usize,
    pub infeasible: usize,
    pub seed: u64,
}

/// 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let (nf, p) = (n as f64, k as f64 / n as f64);
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Replays the committed inputs on `N` perturbed copies of the dynamics,
/// each entry of every `A_t` shifted by `Uniform(−interval/2, interval/2)`,
/// and counts rollouts with any state in collision. Sample `i` draws from
/// its own ChaCha stream, so the result is independent of the worker count.
pub fn monte_carlo_robustness(
    traj: &Trajectory,
    model: &SystemModel,
    scenario: &Scenario,
    interval: f64,
    n: usize,
    seed: u64,
) -> Result<McResult> {
    if !(interval >= 0.0) {
        return Err(Error::InvalidParameter(format!("interval must be nonnegative, got {interval}")));
    }
    if traj.u.len() + 1 != model.horizon {
        return Err(Error::DimensionMismatch("trajectory inputs do not match the horizon".into()));
    }
    let collides_once = |i: usize| -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut x = traj.x[0].clone();
        if scenario.collides(&x) {
            return true;
        }
        for k in 0..model.horizon - 1 {
            let mut a = model.a[k].clone();
            if interval > 0.0 {
                a.iter_mut()
                    .for_each(|v| *v += (rng.random::<f64>() - 0.5) * interval);
            }
            x = &a * &x + &model.b[k] * &traj.u[k];
            if scenario.collides(&x) {
                return true;
            }
        }
        false
    };
    let infeasible: usize = (0..n).into_par_iter().filter(|&i| collides_once(i)).count();
    let p = if n == 0 { 0.0 } else { infeasible as f64 / n as f64 };
    let se = if n == 0 { 0.0 } else { (p * (1.0 - p) / n as f64).sqrt() };
    let (ci_low, ci_high) = wilson_interval(infeasible, n);
    Ok(McResult {
        p,
        ci_low,
        ci_high,
        se,
        n,
        infeasible,
        seed,
    })
}
