//! Distributed ADMM for the Gaussian SRD program.
//!
//! The program is split into a *j*-block of per-step copies and a *k*-block
//! of posterior covariances and slacks:
//!
//! ```text
//! j = {Q_t, R_t, S_t}_{t<T}   with   R_t + S_t = A_t Q_t A_tᵀ + W_t
//! k = {P_t}_{t≤T}, {K_t ⪰ 0}_{t<T}
//! consensus:  Q_t = P_t (dual U_t),  R_t = P_{t+1} (dual Y_t),  S_t = K_t (dual V_t)
//! ```
//!
//! `R_t` carries the propagation coupling back into `P_{t+1}`; without it
//! the k-block would never see the constraint `P_{t+1} ⪯ A P_t Aᵀ + W`.
//! Every update touches each step once and independently, so one iteration
//! costs `O(T)` for fixed state dimension. `Π_t` never appears as an
//! iterate: for fixed `P_t` its optimum is the Schur complement
//! `(P_t⁻¹ + A_tᵀ W_t⁻¹ A_t)⁻¹`, which turns each k-block into a smooth
//! convex problem in `P_t` alone.
//!
//! Duals are scaled (`U = ρ⁻¹ × multiplier`), so every dual step has unit
//! length.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::central::{interior_start, SrdSolution, START_SHRINK};
use crate::error::{Error, Result};
use crate::matcore::{
    chol_logdet, min_eigenvalue, psd_project, eigh, smat, spd_inverse, svec, svec_bilinear, svec_gradient,
    svec_pairs, sym_solve_sylvester_like, GenMat, SymMat,
};
use crate::model::{validate, DistortionSpec, SystemModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Vanilla,
    /// `ĵ = γ j^{m+1} + (1 − γ) k^m`; with `verbatim` the blend is
    /// `γ j^{m+1} − (1 − γ) j^m` instead.
    OverRelaxed { gamma: f64, verbatim: bool },
    /// Nesterov extrapolation of `k` and the duals with periodic restart,
    /// plus `μ(‖Q‖² + ‖R‖² + ‖S‖²)` in the j-objective.
    Accelerated { restart_period: usize, mu_strong: f64 },
}

impl Variant {
    pub fn over_relaxed(gamma: f64) -> Self {
        Variant::OverRelaxed {
            gamma,
            verbatim: false,
        }
    }

    pub fn accelerated() -> Self {
        Variant::Accelerated {
            restart_period: 10,
            mu_strong: 1e-3,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Vanilla => "vanilla".into(),
            Variant::OverRelaxed { gamma, verbatim: false } => format!("over_relaxed_{gamma}"),
            Variant::OverRelaxed { gamma, verbatim: true } => format!("over_relaxed_verbatim_{gamma}"),
            Variant::Accelerated { restart_period, .. } => format!("accelerated_restart_{restart_period}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iter: usize,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub variant: Variant,
    pub workers: usize,
    pub seed: u64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            max_iter: 5000,
            eps_pri: 1e-4,
            eps_dual: 1e-4,
            variant: Variant::Vanilla,
            workers: 1,
            seed: 0,
        }
    }
}

impl AdmmConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.eps_pri > 0.0 && self.eps_dual > 0.0) {
            return Err(Error::InvalidParameter("stopping tolerances must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidParameter("workers must be at least 1".into()));
        }
        match self.variant {
            Variant::OverRelaxed { gamma, .. } if !(gamma > 0.0 && gamma < 2.0) => {
                Err(Error::InvalidGamma(gamma))
            }
            Variant::Accelerated { restart_period, mu_strong } => {
                if restart_period == 0 {
                    return Err(Error::InvalidParameter("restart_period must be at least 1".into()));
                }
                if !(mu_strong >= 0.0) {
                    return Err(Error::InvalidParameter("mu_strong must be nonnegative".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ResidualRecord {
    pub iter: usize,
    pub pri: f64,
    pub dual: f64,
    pub objective: f64,
    /// `max_t ‖R_t + S_t − A_t Q_t A_tᵀ − W_t‖_F` after the j-update.
    pub coupling: f64,
}

/// Per-step split variables. Vectors indexed by step are zero-based:
/// `p[k]` is `P_{k+1}`, and `q[k]`, `r[k]`, `s[k]` belong to the
/// transition from step `k + 1` to `k + 2`.
#[derive(Clone, Debug)]
pub struct AdmmState {
    pub p: Vec<SymMat>,
    pub k: Vec<SymMat>,
    pub q: Vec<SymMat>,
    pub r: Vec<SymMat>,
    pub s: Vec<SymMat>,
    pub u: Vec<SymMat>,
    pub y: Vec<SymMat>,
    pub v: Vec<SymMat>,
    /// Extrapolated k and dual iterates read by the next j-update; equal to
    /// the plain iterates except under acceleration.
    pub p_hat: Vec<SymMat>,
    pub k_hat: Vec<SymMat>,
    pub u_hat: Vec<SymMat>,
    pub y_hat: Vec<SymMat>,
    pub v_hat: Vec<SymMat>,
    /// Relaxed j-iterate consumed by the k- and dual updates.
    pub q_rel: Vec<SymMat>,
    pub r_rel: Vec<SymMat>,
    pub s_rel: Vec<SymMat>,
    pub beta: f64,
    pub iter: usize,
    pub history: Vec<ResidualRecord>,
    /// Whether each block's trace budget was active at its last solve.
    pub trace_active: Vec<bool>,
}

impl AdmmState {
    pub fn horizon(&self) -> usize {
        self.p.len()
    }

    /// Posterior schedule with `Π_t` at its optimum for each `P_t`.
    pub fn solution(&self, model: &SystemModel) -> Result<SrdSolution> {
        SrdSolution::from_posteriors(model, self.p.clone())
    }
}

/// Runs `f` over block indices, on `pool` when given. Output order is the
/// index order either way.
fn map_blocks<T, F>(pool: Option<&ThreadPool>, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool {
        Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}

/// Interior starting point: forward-propagated covariances shrunk into the
/// trace and initial constraints, copies equal to their consensus targets
/// and zero duals, so the primal residual starts at zero.
pub fn init_state(model: &SystemModel, spec: &DistortionSpec, config: &AdmmConfig) -> Result<AdmmState> {
    validate(model, spec).into_result()?;
    config.check()?;
    let p = interior_start(model, spec, START_SHRINK);
    let steps = model.horizon - 1;
    let q: Vec<SymMat> = p[..steps].to_vec();
    let r: Vec<SymMat> = p[1..].to_vec();
    let s: Vec<SymMat> = (0..steps)
        .map(|k| p[k].congruence(&model.a[k]) + &model.w[k] - &p[k + 1])
        .collect();
    let zeros = vec![SymMat::zeros(model.n()); steps];
    Ok(AdmmState {
        p_hat: p.clone(),
        k_hat: s.clone(),
        u_hat: zeros.clone(),
        y_hat: zeros.clone(),
        v_hat: zeros.clone(),
        q_rel: q.clone(),
        r_rel: r.clone(),
        s_rel: s.clone(),
        k: s.clone(),
        p,
        q,
        r,
        s,
        u: zeros.clone(),
        y: zeros.clone(),
        v: zeros,
        beta: 0.0,
        iter: 0,
        history: Vec::new(),
        trace_active: vec![false; model.horizon],
    })
}

/// Closed-form projection of `(G, E, H)` onto `R + S = A Q Aᵀ + W`:
/// `Q = G − AᵀΛA`, `R = E + Λ`, `S = H + Λ` with
/// `MΛM + 2Λ = AGAᵀ + W − E − H`, `M = AAᵀ`.
pub fn j_block(
    a: &GenMat,
    w: &SymMat,
    g: &SymMat,
    e: &SymMat,
    h: &SymMat,
) -> Result<(SymMat, SymMat, SymMat)> {
    let m = SymMat::from_matrix(a * a.transpose()).scale(std::f64::consts::FRAC_1_SQRT_2);
    let rhs = (g.congruence(a) + w - e - h).scale(0.5);
    let lam = sym_solve_sylvester_like(&m, &rhs)?;
    let q = g - &lam.congruence_t(a);
    let r = e + &lam;
    let s = h + &lam;
    Ok((q, r, s))
}

/// Coupling residual `‖R + S − A Q Aᵀ − W‖_F`.
pub fn coupling_residual(a: &GenMat, w: &SymMat, q: &SymMat, r: &SymMat, s: &SymMat) -> f64 {
    (r + s - &q.congruence(a) - w).frob_norm()
}

/// j-update from the extrapolated iterates. `mu_strong` adds
/// `μ(‖Q‖² + ‖R‖² + ‖S‖²)`, which shrinks every target by `1 + μ`.
pub fn j_update(state: &mut AdmmState, model: &SystemModel, mu_strong: f64, pool: Option<&ThreadPool>) -> Result<f64> {
    let steps = state.horizon() - 1;
    let shrink = 1.0 / (1.0 + mu_strong);
    let st = &*state;
    let out = map_blocks(pool, steps, |k| {
        let g = (&st.p_hat[k] - &st.u_hat[k]).scale(shrink);
        let e = (&st.p_hat[k + 1] - &st.y_hat[k]).scale(shrink);
        let h = (&st.k_hat[k] - &st.v_hat[k]).scale(shrink);
        let (q, r, s) = j_block(&model.a[k], &model.w[k], &g, &e, &h)?;
        let c = coupling_residual(&model.a[k], &model.w[k], &q, &r, &s);
        Ok::<_, Error>((q, r, s, c))
    });
    let mut coupling: f64 = 0.0;
    for (k, res) in out.into_iter().enumerate() {
        let (q, r, s, c) = res?;
        state.q[k] = q;
        state.r[k] = r;
        state.s[k] = s;
        coupling = coupling.max(c);
    }
    Ok(coupling)
}

/// Standard relaxation `ĵ = γ j^{m+1} + (1 − γ) k^m` against the consensus
/// values from the previous k-iterate, or the verbatim
/// `γ j^{m+1} − (1 − γ) j^m` when `verbatim` is set.
pub fn over_relax_blend(state: &mut AdmmState, gamma: f64, verbatim: bool) -> Result<()> {
    if !(gamma > 0.0 && gamma < 2.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    let steps = state.horizon() - 1;
    for k in 0..steps {
        if verbatim {
            state.q_rel[k] = state.q[k].scale(gamma) - state.q_rel[k].scale(1.0 - gamma);
            state.r_rel[k] = state.r[k].scale(gamma) - state.r_rel[k].scale(1.0 - gamma);
            state.s_rel[k] = state.s[k].scale(gamma) - state.s_rel[k].scale(1.0 - gamma);
        } else {
            state.q_rel[k] = state.q[k].scale(gamma) + state.p_hat[k].scale(1.0 - gamma);
            state.r_rel[k] = state.r[k].scale(gamma) + state.p_hat[k + 1].scale(1.0 - gamma);
            state.s_rel[k] = state.s[k].scale(gamma) + state.k_hat[k].scale(1.0 - gamma);
        }
    }
    Ok(())
}

fn no_relaxation(state: &mut AdmmState) {
    state.q_rel.clone_from(&state.q);
    state.r_rel.clone_from(&state.r);
    state.s_rel.clone_from(&state.s);
}

// ---------------------------------------------------------------------------
// k-block solver

/// One k-block: minimize `(2/ρ) φ(P) + c ‖P − G‖²_F` subject to
/// `tr(Θ P) ≤ D` and, for the first block, `P ⪯ P0`. Here
/// `φ(P) = −logdet P + logdet(W + A P Aᵀ) − logdet W` for steps with a
/// successor and `φ(P) = −logdet P` at the terminal step.
#[derive(Clone, Debug)]
pub struct BlockProblem<'a> {
    pub dynamics: Option<(&'a GenMat, &'a SymMat)>,
    pub weight: f64,
    pub prox: f64,
    pub target: SymMat,
    pub theta: &'a SymMat,
    pub d: f64,
    pub p0: Option<&'a SymMat>,
}

/// Block objective `φ(P)` at its optimal `Π`, i.e. `−logdet Π(P)`.
pub fn block_phi(p: &SymMat, dynamics: Option<(&GenMat, &SymMat)>) -> Result<f64> {
    let mut f = -chol_logdet(p)?;
    if let Some((a, w)) = dynamics {
        f += chol_logdet(&(w + &p.congruence(a)))? - chol_logdet(w)?;
    }
    Ok(f)
}

struct Eval {
    f: f64,
    /// Gradient as a matrix, in the original coordinates.
    grad: DMatrix<f64>,
    /// Orthogonal basis the Hessian is expressed in.
    basis: DMatrix<f64>,
    /// Hessian over svec coordinates of `basisᵀ P basis`.
    h: DMatrix<f64>,
}

impl Eval {
    fn rotate(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.basis.transpose() * m * &self.basis;
        (&r + r.transpose()) * 0.5
    }
}

impl BlockProblem<'_> {
    fn value(&self, p: &SymMat, barrier: Option<f64>) -> Option<f64> {
        let pchol = p.matrix().clone().cholesky()?;
        let mut f = -2.0 * pchol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if let Some((a, w)) = self.dynamics {
            let inner = (w + &p.congruence(a)).into_matrix().cholesky()?;
            f += 2.0 * inner.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        let mut v = self.weight * f + self.prox * (p - &self.target).frob_norm_sq();
        if let (Some(mu), Some(p0)) = (barrier, self.p0) {
            let slack = (p0 - p).into_matrix().cholesky()?;
            v -= mu * 2.0 * slack.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        Some(v)
    }

    /// Value, gradient and Hessian. With the `P ⪯ P0` barrier the Hessian
    /// is built in the eigenbasis of `P0 − P`, where the barrier part is
    /// diagonal. Near the boundary that part reaches 1e18 and would swamp
    /// the rest in roundoff if it were formed in a generic basis.
    fn eval(&self, p: &SymMat, barrier: Option<f64>) -> Option<Eval> {
        let f = self.value(p, barrier)?;
        let n = p.dim();
        let slack = match (barrier, self.p0) {
            (Some(mu), Some(p0)) => Some((mu, p0 - p)),
            _ => None,
        };
        let basis = match &slack {
            Some((_, z)) => eigh(z).1,
            None => DMatrix::identity(n, n),
        };
        let mut ev = Eval {
            f,
            grad: DMatrix::zeros(n, n),
            basis,
            h: DMatrix::zeros(0, 0),
        };
        let pinv = p.matrix().clone().cholesky()?.inverse();
        let rp = ev.rotate(&pinv);
        let (mut grad, mut hess) = match self.dynamics {
            Some((a, w)) => {
                // With J = Aᵀ(W + APAᵀ)⁻¹A, the gradient is −(P⁻¹ − J) and the
                // Hessian is P⁻¹⊗P⁻¹ − J⊗J. Both are formed from
                // P⁻¹ − J = P⁻¹ Π P⁻¹, which avoids cancelling two large
                // terms when W is small next to APAᵀ.
                let ap = a * p.matrix();
                let inner = (w + &p.congruence(a)).into_matrix().cholesky()?;
                let pi = p.matrix() - ap.transpose() * inner.solve(&ap);
                let diff = &pinv * pi * &pinv;
                let diff = (&diff + diff.transpose()) * 0.5;
                let rd = ev.rotate(&diff);
                let sum = &rp * 2.0 - &rd;
                (-&diff, svec_bilinear(&rd, &sum))
            }
            None => (-&pinv, svec_bilinear(&rp, &rp)),
        };
        grad *= self.weight;
        hess *= self.weight;
        grad += (p.matrix() - self.target.matrix()) * (2.0 * self.prox);
        for (i, (a, b)) in svec_pairs(n).into_iter().enumerate() {
            hess[(i, i)] += 2.0 * self.prox * if a == b { 1.0 } else { 2.0 };
        }
        if let Some((mu, z)) = slack {
            let zinv = z.into_matrix().cholesky()?.inverse();
            let rz = ev.rotate(&zinv);
            grad += &zinv * mu;
            hess += svec_bilinear(&rz, &rz) * mu;
        }
        ev.grad = grad;
        ev.h = hess;
        Some(ev)
    }

    /// Damped Newton from `start`, optionally on the plane `tr(Θ P) = D`
    /// (which `start` must satisfy). Returns the minimizer and, on the
    /// plane, the multiplier `ν` of `g + ν ∇tr = 0`.
    fn newton(&self, start: SymMat, barrier: Option<f64>, on_plane: bool) -> Result<(SymMat, f64)> {
        let n = start.dim();
        let mut x = svec(&start);
        let mut ev = self
            .eval(&start, barrier)
            .ok_or_else(|| Error::NumericalStall("k-block start outside domain".into()))?;
        let mut nu = 0.0;
        for _ in 0..200 {
            let g = svec_gradient(&SymMat::from_matrix(ev.rotate(&ev.grad)));
            let a = svec_gradient(&SymMat::from_matrix(ev.rotate(self.theta.matrix())));
            let scale = ev.h.diagonal().map(|d| 1.0 / d.abs().max(f64::MIN_POSITIVE).sqrt());
            let scaled = DMatrix::from_fn(scale.len(), scale.len(), |i, j| ev.h[(i, j)] * scale[i] * scale[j]);
            let chol = scaled
                .cholesky()
                .ok_or_else(|| Error::NumericalStall("k-block Hessian not positive definite".into()))?;
            let solve = |b: &DVector<f64>| chol.solve(&b.component_mul(&scale)).component_mul(&scale);
            let hg = solve(&g);
            let dxr = if on_plane {
                let ha = solve(&a);
                nu = -a.dot(&hg) / a.dot(&ha);
                -(hg + ha * nu)
            } else {
                -hg
            };
            let slope = g.dot(&dxr);
            let dp = &ev.basis * smat(dxr.as_slice(), n).matrix() * ev.basis.transpose();
            let dx = svec(&SymMat::from_matrix(dp));
            let dec = -slope;
            if dec <= 1e-15 * ev.f.abs().max(1.0) {
                // Inside the quadratic region: one more full step lands at
                // roundoff level.
                let last = smat((&x + &dx).as_slice(), n);
                return Ok(match self.value(&last, barrier) {
                    Some(_) => (last, nu),
                    None => (smat(x.as_slice(), n), nu),
                });
            }
            let mut step = 1.0;
            loop {
                let trial = &x + &dx * step;
                let pt = smat(trial.as_slice(), n);
                if let Some(ft) = self.value(&pt, barrier) {
                    if ft >= ev.f && step < 1e-3 {
                        // Merit plateau at roundoff level.
                        return Ok((smat(x.as_slice(), n), nu));
                    }
                    if ft <= ev.f + 0.25 * step * slope {
                        x = trial;
                        ev = self
                            .eval(&pt, barrier)
                            .ok_or_else(|| Error::NumericalStall("k-block left domain".into()))?;
                        break;
                    }
                }
                step *= 0.5;
                if step < 1e-14 {
                    // Below merit resolution: the current point is as good
                    // as the arithmetic allows.
                    return Ok((smat(x.as_slice(), n), nu));
                }
            }
        }
        Err(Error::NumericalStall("k-block Newton did not converge".into()))
    }

    /// A point on `tr(Θ P) = D` reached from `warm` while keeping every
    /// domain condition strict.
    fn plane_start(&self, warm: &SymMat, barrier: Option<f64>) -> Option<SymMat> {
        let tr = self.theta.dot(warm);
        let f = self.d / tr;
        if f <= 1.0 {
            return Some(warm.scale(f));
        }
        match (barrier, self.p0) {
            (Some(_), Some(p0)) => {
                let tr0 = self.theta.dot(p0);
                if tr0 <= self.d {
                    return None;
                }
                // Candidates: the point towards P0 keeps the slack profile
                // of `warm`, which suits a warm start on the barrier path;
                // the analytic centre of the slice (P0 − P = (δ/n) Θ⁻¹) is
                // safer when `warm` hugs the P0 boundary. Take whichever the
                // barrier objective prefers.
                let n = warm.dim();
                let delta = tr0 - self.d;
                let toward = warm + &(p0 - warm).scale((self.d - tr) / (tr0 - tr));
                let centre = spd_inverse(self.theta)
                    .ok()
                    .map(|ti| p0 - &ti.scale(delta / n as f64));
                [Some(toward), centre, Some(p0.scale(self.d / tr0))]
                    .into_iter()
                    .flatten()
                    .filter_map(|p| self.value(&p, barrier).map(|v| (v, p)))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, p)| p)
            }
            _ => {
                let n = warm.dim();
                Some(warm + &SymMat::scaled_identity(n, (self.d - tr) / self.theta.trace()))
            }
        }
    }

    /// Exact active-set treatment of the trace budget, trying the previous
    /// status first.
    fn solve_trace(&self, warm: &SymMat, barrier: Option<f64>, prev_active: bool) -> Result<(SymMat, bool)> {
        let budget_ok = |p: &SymMat| self.theta.dot(p) <= self.d * (1.0 + 1e-12);
        let free_possible = self.prox > 0.0;
        let mut plane_result = None;
        let order = if prev_active || !free_possible {
            [true, false]
        } else {
            [false, true]
        };
        for on_plane in order {
            if on_plane {
                let Some(start) = self.plane_start(warm, barrier) else {
                    continue;
                };
                let (p, nu) = self.newton(start, barrier, true)?;
                if nu >= -1e-10 {
                    return Ok((p, true));
                }
                plane_result = Some(p);
            } else if free_possible {
                let (p, _) = self.newton(warm.clone(), barrier, false)?;
                if budget_ok(&p) {
                    return Ok((p, false));
                }
            }
        }
        // Both tests failed only through roundoff at a degenerate vertex.
        plane_result
            .map(|p| (p, true))
            .ok_or_else(|| Error::NumericalStall("k-block active set did not settle".into()))
    }

    /// Solves the block from a strictly positive definite `warm` start.
    pub fn solve(&self, warm: &SymMat, prev_active: bool) -> Result<(SymMat, bool)> {
        if !(self.d > 0.0) {
            return Err(Error::InvalidParameter("budget must be positive".into()));
        }
        let Some(p0) = self.p0 else {
            return self.solve_trace(warm, None, prev_active);
        };
        if self.prox > 0.0 {
            let (p, active) = self.solve_trace(warm, None, prev_active)?;
            if min_eigenvalue(&(p0 - &p)) > 0.0 {
                return Ok((p, active));
            }
        }
        // `P ⪯ P0` binds: follow a barrier path on it.
        let mut cur = if min_eigenvalue(&(p0 - warm)) > 0.0 {
            warm.clone()
        } else {
            p0.scale(0.5 * (self.d / self.theta.dot(p0)).min(1.0))
        };
        let mut active = prev_active;
        let mut mu = 1e-1;
        while mu >= 1e-12 {
            let (p, act) = self.solve_trace(&cur, Some(mu), active)?;
            cur = p;
            active = act;
            mu /= 10.0;
        }
        Ok((cur, active))
    }
}

/// k-update: `K_t = Π_psd(Ŝ_t + V̂_t)` and one [`BlockProblem`] per step.
pub fn k_update(
    state: &mut AdmmState,
    model: &SystemModel,
    spec: &DistortionSpec,
    config: &AdmmConfig,
    initial_constraint: bool,
    pool: Option<&ThreadPool>,
) -> Result<()> {
    let t_len = state.horizon();
    let st = &*state;
    let k_new = map_blocks(pool, t_len - 1, |k| psd_project(&(&st.s_rel[k] + &st.v_hat[k])));
    let p_new = map_blocks(pool, t_len, |k| {
        let mut targets = Vec::with_capacity(2);
        if k + 1 < t_len {
            targets.push(&st.q_rel[k] + &st.u_hat[k]);
        }
        if k >= 1 {
            targets.push(&st.r_rel[k - 1] + &st.y_hat[k - 1]);
        }
        let prox = targets.len() as f64;
        let target = match targets.len() {
            0 => SymMat::zeros(model.n()),
            1 => targets.pop().unwrap(),
            _ => (&targets[0] + &targets[1]).scale(0.5),
        };
        let prob = BlockProblem {
            dynamics: (k + 1 < t_len).then(|| (&model.a[k], &model.w[k])),
            weight: 2.0 / config.rho,
            prox,
            target,
            theta: &spec.theta[k],
            d: spec.d[k],
            p0: (k == 0 && initial_constraint).then_some(&model.p0),
        };
        prob.solve(&st.p[k], st.trace_active[k]).map_err(|e| match e {
            Error::InvalidParameter(_) => Error::BlockInfeasible(k + 1),
            other => other,
        })
    });
    for (k, kk) in k_new.into_iter().enumerate() {
        state.k[k] = kk;
    }
    for (k, res) in p_new.into_iter().enumerate() {
        let (p, active) = res?;
        state.p[k] = p;
        state.trace_active[k] = active;
    }
    Ok(())
}

/// Scaled dual ascent: `U = Û + Q̂ − P`, `Y = Ŷ + R̂ − P_{t+1}`, `V = V̂ + Ŝ − K`.
pub fn dual_update(state: &mut AdmmState) {
    let steps = state.horizon() - 1;
    for k in 0..steps {
        state.u[k] = &state.u_hat[k] + &state.q_rel[k] - &state.p[k];
        state.y[k] = &state.y_hat[k] + &state.r_rel[k] - &state.p[k + 1];
        state.v[k] = &state.v_hat[k] + &state.s_rel[k] - &state.k[k];
    }
}

/// Previous k and dual iterates, needed for extrapolation.
#[derive(Clone, Debug)]
pub struct PreviousIterate {
    pub p: Vec<SymMat>,
    pub k: Vec<SymMat>,
    pub u: Vec<SymMat>,
    pub y: Vec<SymMat>,
    pub v: Vec<SymMat>,
}

impl PreviousIterate {
    pub fn of(state: &AdmmState) -> Self {
        PreviousIterate {
            p: state.p.clone(),
            k: state.k.clone(),
            u: state.u.clone(),
            y: state.y.clone(),
            v: state.v.clone(),
        }
    }
}

fn reset_hats(state: &mut AdmmState) {
    state.p_hat.clone_from(&state.p);
    state.k_hat.clone_from(&state.k);
    state.u_hat.clone_from(&state.u);
    state.y_hat.clone_from(&state.y);
    state.v_hat.clone_from(&state.v);
}

/// `β⁺ = (1 + √(1 + 4β²)) / 2`, `x̂ = x + max(0, (β − 1)/β⁺)(x − x_prev)`
/// for `P`, `K` and the duals; every `restart_period` iterations `β` returns
/// to zero and the extrapolation is dropped.
pub fn accelerate_step(state: &mut AdmmState, prev: &PreviousIterate, restart_period: usize) {
    let beta_next = (1.0 + (1.0 + 4.0 * state.beta * state.beta).sqrt()) / 2.0;
    let theta = ((state.beta - 1.0) / beta_next).max(0.0);
    state.beta = beta_next;
    if restart_period > 0 && state.iter % restart_period == 0 {
        state.beta = 0.0;
        reset_hats(state);
        return;
    }
    let extrap = |cur: &[SymMat], old: &[SymMat]| -> Vec<SymMat> {
        cur.iter()
            .zip(old)
            .map(|(c, o)| c + &(c - o).scale(theta))
            .collect()
    };
    state.p_hat = extrap(&state.p, &prev.p);
    state.k_hat = extrap(&state.k, &prev.k);
    state.u_hat = extrap(&state.u, &prev.u);
    state.y_hat = extrap(&state.y, &prev.y);
    state.v_hat = extrap(&state.v, &prev.v);
}

/// Current objective `−Σ logdet Π_t(P_t)`.
pub fn objective(state: &AdmmState, model: &SystemModel) -> Result<f64> {
    let t_len = state.horizon();
    let mut f = 0.0;
    for (k, p) in state.p.iter().enumerate() {
        f += block_phi(p, (k + 1 < t_len).then(|| (&model.a[k], &model.w[k])))?;
    }
    Ok(f)
}

/// One full iteration; appends and returns its residual record.
pub fn iterate(
    state: &mut AdmmState,
    model: &SystemModel,
    spec: &DistortionSpec,
    config: &AdmmConfig,
    pool: Option<&ThreadPool>,
) -> Result<ResidualRecord> {
    let mu_strong = match config.variant {
        Variant::Accelerated { mu_strong, .. } => mu_strong,
        _ => 0.0,
    };
    let coupling = j_update(state, model, mu_strong, pool)?;
    match config.variant {
        Variant::OverRelaxed { gamma, verbatim } => over_relax_blend(state, gamma, verbatim)?,
        _ => no_relaxation(state),
    }
    let prev = PreviousIterate::of(state);
    // The j-update was stationary against (P̂, K̂); its dual residual is
    // ρ times the distance of the new k-iterate from that point.
    let (p_ref, k_ref) = (state.p_hat.clone(), state.k_hat.clone());
    k_update(state, model, spec, config, true, pool)?;
    dual_update(state);
    state.iter += 1;

    let steps = state.horizon() - 1;
    let st = &*state;
    let pri_parts = map_blocks(pool, steps, |k| {
        (&st.q[k] - &st.p[k]).frob_norm_sq()
            + (&st.r[k] - &st.p[k + 1]).frob_norm_sq()
            + (&st.s[k] - &st.k[k]).frob_norm_sq()
    });
    let dual_p = map_blocks(pool, state.horizon(), |k| (&st.p[k] - &p_ref[k]).frob_norm_sq());
    let dual_k = map_blocks(pool, steps, |k| (&st.k[k] - &k_ref[k]).frob_norm_sq());
    let pri = pri_parts.iter().sum::<f64>().sqrt();
    let dual = config.rho * (dual_p.iter().sum::<f64>() + dual_k.iter().sum::<f64>()).sqrt();

    match config.variant {
        Variant::Accelerated { restart_period, .. } => accelerate_step(state, &prev, restart_period),
        _ => reset_hats(state),
    }
    let rec = ResidualRecord {
        iter: state.iter,
        pri,
        dual,
        objective: objective(state, model)?,
        coupling,
    };
    state.history.push(rec);
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum Status {
    Converged,
    MaxIterExceeded,
}

#[derive(Clone, Debug)]
pub struct AdmmOutcome {
    pub solution: SrdSolution,
    pub history: Vec<ResidualRecord>,
    pub status: Status,
    pub state: AdmmState,
}

impl AdmmOutcome {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
}

pub fn build_pool(workers: usize) -> Result<Option<ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))
}

/// Iterates until both residuals are below their tolerances or `max_iter`
/// is reached. Hitting the limit is reported through [`Status`] with the
/// last iterate, not as an error.
pub fn run(model: &SystemModel, spec: &DistortionSpec, config: &AdmmConfig) -> Result<AdmmOutcome> {
    let mut state = init_state(model, spec, config)?;
    let pool = build_pool(config.workers)?;
    let mut status = Status::MaxIterExceeded;
    for _ in 0..config.max_iter {
        let rec = iterate(&mut state, model, spec, config, pool.as_ref())?;
        if rec.pri < config.eps_pri && rec.dual < config.eps_dual {
            status = Status::Converged;
            break;
        }
    }
    Ok(AdmmOutcome {
        solution: state.solution(model)?,
        history: state.history.clone(),
        status,
        state,
    })
}

/// Runs exactly `iters` iterations regardless of the residuals.
pub fn run_fixed(
    model: &SystemModel,
    spec: &DistortionSpec,
    config: &AdmmConfig,
    iters: usize,
) -> Result<AdmmState> {
    let mut state = init_state(model, spec, config)?;
    let pool = build_pool(config.workers)?;
    for _ in 0..iters {
        iterate(&mut state, model, spec, config, pool.as_ref())?;
    }
    Ok(state)
}

/// Residual history as CSV with header `iter,pri,dual,objective`.
pub fn residual_csv(history: &[ResidualRecord]) -> String {
    let mut out = String::from("iter,pri,dual,objective\n");
    for r in history {
        out.push_str(&format!("{},{:e},{:e},{:.12e}\n", r.iter, r.pri, r.dual, r.objective));
    }
    out
}
