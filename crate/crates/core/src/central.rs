//! Centralized log-barrier interior-point solver.
//!
//! [`ConicProgram`] is a small, dense conic modelling layer: symmetric-matrix
//! and vector variables, `−w logdet` objective terms, a convex quadratic and
//! a linear term, LMIs, scalar inequalities and equalities. [`solve_barrier`]
//! runs a textbook path-following method on it with dense Newton steps, so
//! one solve costs `O(N³)` in the number of scalar coordinates `N`. That is
//! deliberate: the solver is the reference against which the distributed
//! ADMM engine is checked, and the superlinear baseline of the scaling study.

use std::collections::BTreeMap;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::matcore::{
    chol_logdet, lmi_margin, min_eigenvalue, svec_pairs, GenMat, SymMat,
};
use crate::model::{DistortionSpec, SystemModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarKind {
    Sym(usize),
    Vector(usize),
}

impl VarKind {
    pub fn len(self) -> usize {
        match self {
            VarKind::Sym(n) => n * (n + 1) / 2,
            VarKind::Vector(n) => n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarBlock {
    pub name: String,
    pub kind: VarKind,
    pub offset: usize,
}

/// Handle to a declared variable block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

/// `F(x) = F₀ + Σ x_i F_i`, a symmetric-matrix-valued affine map.
#[derive(Clone, Debug)]
pub struct AffineMatrix {
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl AffineMatrix {
    pub fn zeros(dim: usize) -> Self {
        AffineMatrix {
            constant: DMatrix::zeros(dim, dim),
            terms: Vec::new(),
        }
    }

    pub fn with_constant(constant: DMatrix<f64>) -> Self {
        AffineMatrix {
            constant,
            terms: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    /// Adds `sign · L X Lᵀ` for the symmetric variable `X`.
    pub fn add_congruence(&mut self, prog: &ConicProgram, var: VarId, l: &GenMat, sign: f64) {
        let block = &prog.vars[var.0];
        let VarKind::Sym(n) = block.kind else {
            panic!("congruence term needs a symmetric variable, got {}", block.name);
        };
        assert_eq!(l.ncols(), n, "congruence factor has wrong column count");
        assert_eq!(l.nrows(), self.dim(), "congruence factor has wrong row count");
        for (k, (a, b)) in svec_pairs(n).into_iter().enumerate() {
            let la = l.column(a);
            let lb = l.column(b);
            let coeff = if a == b {
                &la * la.transpose() * sign
            } else {
                (&la * lb.transpose() + &lb * la.transpose()) * sign
            };
            self.terms.push((block.offset + k, coeff));
        }
    }

    /// Adds `X` itself (identity congruence).
    pub fn add_var(&mut self, prog: &ConicProgram, var: VarId, sign: f64) {
        let n = self.dim();
        self.add_congruence(prog, var, &DMatrix::identity(n, n), sign);
    }

    pub fn add_term(&mut self, coord: usize, coeff: DMatrix<f64>) {
        self.terms.push((coord, coeff));
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut f = self.constant.clone();
        for (i, c) in &self.terms {
            f += c * x[*i];
        }
        f
    }
}

/// `c + Σ a_i x_i`.
#[derive(Clone, Debug, Default)]
pub struct LinearForm {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl LinearForm {
    pub fn new(constant: f64) -> Self {
        LinearForm {
            constant,
            terms: Vec::new(),
        }
    }

    pub fn add(&mut self, coord: usize, coeff: f64) -> &mut Self {
        self.terms.push((coord, coeff));
        self
    }

    /// Adds `scale · ⟨G, X⟩` for the symmetric variable `X`.
    pub fn add_sym_inner(&mut self, prog: &ConicProgram, var: VarId, g: &SymMat, scale: f64) -> &mut Self {
        let block = &prog.vars[var.0];
        let VarKind::Sym(n) = block.kind else {
            panic!("inner product needs a symmetric variable, got {}", block.name);
        };
        for (k, (a, b)) in svec_pairs(n).into_iter().enumerate() {
            let w = if a == b { g[(a, a)] } else { 2.0 * g[(a, b)] };
            self.terms.push((block.offset + k, scale * w));
        }
        self
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.constant + self.terms.iter().map(|(i, a)| a * x[*i]).sum::<f64>()
    }
}

/// Constraint label: a family name and an optional 1-based step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Label {
    pub family: String,
    pub t: Option<usize>,
}

impl Label {
    pub fn new(family: &str, t: Option<usize>) -> Self {
        Label {
            family: family.to_string(),
            t,
        }
    }
}

/// Minimize `Σ −w_k logdet G_k(x) + Σ q_ij x_i x_j + cᵀx` subject to
/// `F_l(x) ⪰ 0`, `a_jᵀx + b_j ≥ 0` and `e_kᵀx + f_k = 0`.
#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    pub vars: Vec<VarBlock>,
    pub n_coords: usize,
    pub logdet_terms: Vec<(f64, AffineMatrix)>,
    /// Triplets `(i, j, q)` contributing `q x_i x_j`.
    pub quadratic: Vec<(usize, usize, f64)>,
    pub linear: Vec<(usize, f64)>,
    pub lmis: Vec<(Label, AffineMatrix)>,
    pub inequalities: Vec<(Label, LinearForm)>,
    pub equalities: Vec<(Label, LinearForm)>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    fn add_block(&mut self, name: &str, kind: VarKind) -> VarId {
        let id = VarId(self.vars.len());
        self.vars.push(VarBlock {
            name: name.to_string(),
            kind,
            offset: self.n_coords,
        });
        self.n_coords += kind.len();
        id
    }

    pub fn add_sym(&mut self, name: &str, n: usize) -> VarId {
        self.add_block(name, VarKind::Sym(n))
    }

    pub fn add_vector(&mut self, name: &str, len: usize) -> VarId {
        self.add_block(name, VarKind::Vector(len))
    }

    pub fn block(&self, var: VarId) -> &VarBlock {
        &self.vars[var.0]
    }

    /// Coordinate of entry `(a, b)` of a symmetric variable.
    pub fn sym_coord(&self, var: VarId, a: usize, b: usize) -> usize {
        let block = &self.vars[var.0];
        let VarKind::Sym(n) = block.kind else {
            panic!("{} is not symmetric", block.name);
        };
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        // Rows before `a` hold n + (n − 1) + … + (n − a + 1) entries.
        block.offset + a * n - a * a.saturating_sub(1) / 2 + (b - a)
    }

    pub fn vec_coord(&self, var: VarId, i: usize) -> usize {
        let block = &self.vars[var.0];
        let VarKind::Vector(len) = block.kind else {
            panic!("{} is not a vector", block.name);
        };
        assert!(i < len);
        block.offset + i
    }

    pub fn add_logdet_objective(&mut self, weight: f64, f: AffineMatrix) {
        self.logdet_terms.push((weight, f));
    }

    pub fn add_quadratic(&mut self, i: usize, j: usize, q: f64) {
        self.quadratic.push((i, j, q));
    }

    pub fn add_linear(&mut self, i: usize, c: f64) {
        self.linear.push((i, c));
    }

    pub fn add_lmi(&mut self, label: Label, f: AffineMatrix) {
        self.lmis.push((label, f));
    }

    pub fn add_inequality(&mut self, label: Label, f: LinearForm) {
        self.inequalities.push((label, f));
    }

    pub fn add_equality(&mut self, label: Label, f: LinearForm) {
        self.equalities.push((label, f));
    }

    pub fn count_lmis(&self, family: &str) -> usize {
        self.lmis.iter().filter(|(l, _)| l.family == family).count()
    }

    pub fn count_inequalities(&self, family: &str) -> usize {
        self.inequalities.iter().filter(|(l, _)| l.family == family).count()
    }

    pub fn count_equalities(&self, family: &str) -> usize {
        self.equalities.iter().filter(|(l, _)| l.family == family).count()
    }

    /// Barrier parameter: total LMI dimension plus scalar inequality count.
    pub fn barrier_degree(&self) -> f64 {
        (self.lmis.iter().map(|(_, f)| f.dim()).sum::<usize>() + self.inequalities.len()) as f64
    }

    /// Structural consistency of every term.
    pub fn check(&self) -> Result<()> {
        let n = self.n_coords;
        let check_aff = |what: &str, f: &AffineMatrix| -> Result<()> {
            if !f.constant.is_square() {
                return Err(Error::DimensionMismatch(format!("{what}: constant not square")));
            }
            for (i, c) in &f.terms {
                if *i >= n || c.shape() != f.constant.shape() {
                    return Err(Error::DimensionMismatch(format!("{what}: bad term on coordinate {i}")));
                }
            }
            Ok(())
        };
        for (_, f) in &self.logdet_terms {
            check_aff("logdet term", f)?;
        }
        for (l, f) in &self.lmis {
            check_aff(&format!("LMI {}", l.family), f)?;
        }
        let forms = self.inequalities.iter().chain(self.equalities.iter());
        for (l, f) in forms {
            if f.terms.iter().any(|(i, _)| *i >= n) {
                return Err(Error::DimensionMismatch(format!("{}: coordinate out of range", l.family)));
            }
        }
        if self
            .quadratic
            .iter()
            .any(|&(i, j, _)| i >= n || j >= n)
            || self.linear.iter().any(|&(i, _)| i >= n)
        {
            return Err(Error::DimensionMismatch("objective coordinate out of range".into()));
        }
        Ok(())
    }

    /// Value of the objective without barrier terms; `None` outside the
    /// domain of a logdet term.
    pub fn objective(&self, x: &DVector<f64>) -> Option<f64> {
        let mut f = 0.0;
        for (w, g) in &self.logdet_terms {
            let l = g.eval(x).cholesky()?;
            f -= w * 2.0 * l.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        for &(i, j, q) in &self.quadratic {
            f += q * x[i] * x[j];
        }
        for &(i, c) in &self.linear {
            f += c * x[i];
        }
        Some(f)
    }

    pub fn sym_value(&self, x: &DVector<f64>, var: VarId) -> SymMat {
        let block = &self.vars[var.0];
        let VarKind::Sym(n) = block.kind else {
            panic!("{} is not symmetric", block.name);
        };
        let mut m = DMatrix::zeros(n, n);
        for (k, (a, b)) in svec_pairs(n).into_iter().enumerate() {
            m[(a, b)] = x[block.offset + k];
            m[(b, a)] = x[block.offset + k];
        }
        SymMat::from_matrix(m)
    }

    pub fn vector_value(&self, x: &DVector<f64>, var: VarId) -> DVector<f64> {
        let block = &self.vars[var.0];
        x.rows(block.offset, block.kind.len()).into_owned()
    }

    pub fn set_sym(&self, x: &mut DVector<f64>, var: VarId, m: &SymMat) {
        let block = &self.vars[var.0];
        for (k, (a, b)) in svec_pairs(m.dim()).into_iter().enumerate() {
            x[block.offset + k] = m[(a, b)];
        }
    }

    pub fn set_vector(&self, x: &mut DVector<f64>, var: VarId, v: &DVector<f64>) {
        let block = &self.vars[var.0];
        x.rows_mut(block.offset, v.len()).copy_from(v);
    }
}

// ---------------------------------------------------------------------------
// Barrier method

#[derive(Clone, Debug)]
pub struct BarrierOptions {
    /// Stop once the duality-gap proxy `ν μ` falls below `tol · max(1, |f₀|)`.
    pub tol: f64,
    pub mu0: f64,
    pub mu_factor: f64,
    /// Newton stops once the decrement `√(gᵀH⁻¹g)` is below this.
    pub newton_tol: f64,
    pub ls_alpha: f64,
    pub ls_beta: f64,
    pub max_newton_per_stage: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            tol: 1e-8,
            mu0: 1.0,
            mu_factor: 10.0,
            newton_tol: 1e-8,
            ls_alpha: 0.3,
            ls_beta: 0.5,
            max_newton_per_stage: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BarrierSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub newton_steps: usize,
    pub gap: f64,
    pub phase_one: bool,
}

/// Solves `prog` from `x0` (zeros if absent). A start that is not strictly
/// feasible is repaired by a phase-I slack minimization.
pub fn solve_barrier(
    prog: &ConicProgram,
    x0: Option<&DVector<f64>>,
    opts: &BarrierOptions,
) -> Result<BarrierSolution> {
    prog.check()?;
    let n = prog.n_coords;
    let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
    if x.len() != n {
        return Err(Error::DimensionMismatch(format!("start has {} coordinates, program {n}", x.len())));
    }
    let eq = EqualitySystem::new(prog);
    eq.project(&mut x)?;
    let mut steps = 0;
    let mut phase_one = false;
    if !strictly_feasible(prog, &x) {
        phase_one = true;
        let (x1, s1) = phase_one_start(prog, &x, opts)?;
        x = x1;
        steps += s1;
    }
    let nu = prog.barrier_degree();
    let mut mu = opts.mu0;
    loop {
        steps += newton_stage(prog, &mut x, mu, opts, &eq, None)?;
        let scale = prog.objective(&x).map_or(1.0, |f| f.abs().max(1.0));
        if nu * mu < opts.tol * scale || nu == 0.0 {
            break;
        }
        mu /= opts.mu_factor;
    }
    let objective = prog
        .objective(&x)
        .ok_or_else(|| Error::NumericalStall("solution left the objective domain".into()))?;
    Ok(BarrierSolution {
        x,
        objective,
        newton_steps: steps,
        gap: nu * mu,
        phase_one,
    })
}

fn strictly_feasible(prog: &ConicProgram, x: &DVector<f64>) -> bool {
    prog.logdet_terms
        .iter()
        .map(|(_, f)| f)
        .chain(prog.lmis.iter().map(|(_, f)| f))
        .all(|f| f.eval(x).cholesky().is_some())
        && prog.inequalities.iter().all(|(_, g)| g.eval(x) > 0.0)
}

/// Minimizes `s` subject to `F(x) + sI ⪰ 0`, `g(x) + s ≥ 0`, `s ≥ −1` and
/// the original equalities; returns as soon as `s < 0`.
fn phase_one_start(
    prog: &ConicProgram,
    x0: &DVector<f64>,
    opts: &BarrierOptions,
) -> Result<(DVector<f64>, usize)> {
    let n = prog.n_coords;
    let s_coord = n;
    let mut aux = ConicProgram {
        vars: prog.vars.clone(),
        n_coords: n + 1,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let shifted = |f: &AffineMatrix| {
        let mut g = f.clone();
        g.add_term(s_coord, DMatrix::identity(f.dim(), f.dim()));
        g
    };
    for (_, f) in &prog.logdet_terms {
        aux.add_lmi(Label::new("phase1-domain", None), shifted(f));
        worst = worst.max(-min_eigenvalue(&SymMat::from_matrix(f.eval(x0))));
    }
    for (l, f) in &prog.lmis {
        aux.add_lmi(l.clone(), shifted(f));
        worst = worst.max(-min_eigenvalue(&SymMat::from_matrix(f.eval(x0))));
    }
    for (l, g) in &prog.inequalities {
        let mut g2 = g.clone();
        g2.add(s_coord, 1.0);
        aux.add_inequality(l.clone(), g2);
        worst = worst.max(-g.eval(x0));
    }
    let mut floor = LinearForm::new(1.0);
    floor.add(s_coord, 1.0);
    aux.add_inequality(Label::new("phase1-floor", None), floor);
    aux.equalities = prog.equalities.clone();
    aux.add_linear(s_coord, 1.0);

    let aux_eq = EqualitySystem::new(&aux);
    let mut x = DVector::zeros(n + 1);
    x.rows_mut(0, n).copy_from(x0);
    x[s_coord] = worst + 1.0;
    let stop = |v: &DVector<f64>| v[s_coord] < 0.0;
    let nu = aux.barrier_degree();
    let mut mu = opts.mu0;
    let mut steps = 0;
    loop {
        steps += newton_stage(&aux, &mut x, mu, opts, &aux_eq, Some(&stop))?;
        if stop(&x) {
            let cand = x.rows(0, n).into_owned();
            if strictly_feasible(prog, &cand) {
                return Ok((cand, steps));
            }
        }
        if nu * mu < opts.tol {
            return Err(Error::Infeasible(format!(
                "phase I stalled at max violation {:.3e}",
                x[s_coord]
            )));
        }
        mu /= opts.mu_factor;
    }
}

/// Dense equality system `E x + f = 0`.
struct EqualitySystem {
    e: DMatrix<f64>,
    f: DVector<f64>,
}

impl EqualitySystem {
    fn new(prog: &ConicProgram) -> Self {
        let p = prog.equalities.len();
        let mut e = DMatrix::zeros(p, prog.n_coords);
        let mut f = DVector::zeros(p);
        for (k, (_, form)) in prog.equalities.iter().enumerate() {
            f[k] = form.constant;
            for &(i, a) in &form.terms {
                e[(k, i)] += a;
            }
        }
        EqualitySystem { e, f }
    }

    fn is_empty(&self) -> bool {
        self.e.nrows() == 0
    }

    /// Least-norm correction onto `E x + f = 0`.
    fn project(&self, x: &mut DVector<f64>) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let r = &self.e * &*x + &self.f;
        if r.amax() == 0.0 {
            return Ok(());
        }
        let gram = &self.e * self.e.transpose();
        let y = gram
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::InvalidParameter("equality constraints are rank deficient".into()))?;
        *x -= self.e.transpose() * y;
        Ok(())
    }
}

/// Value of `f₀ + μ·barrier`, or `None` outside the domain.
fn merit(prog: &ConicProgram, x: &DVector<f64>, mu: f64) -> Option<f64> {
    let mut v = prog.objective(x)?;
    for (_, f) in &prog.lmis {
        let l = f.eval(x).cholesky()?;
        v -= mu * 2.0 * l.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }
    for (_, g) in &prog.inequalities {
        let s = g.eval(x);
        if !(s > 0.0) {
            return None;
        }
        v -= mu * s.ln();
    }
    Some(v)
}

fn add_logdet_derivatives(
    f: &AffineMatrix,
    w: f64,
    x: &DVector<f64>,
    grad: &mut DVector<f64>,
    hess: &mut Mat<f64>,
) -> Result<()> {
    let chol = f
        .eval(x)
        .cholesky()
        .ok_or_else(|| Error::NumericalStall("iterate left the cone".into()))?;
    let l = chol.l();
    let z: Vec<DMatrix<f64>> = f
        .terms
        .iter()
        .map(|(_, c)| {
            let y = l.solve_lower_triangular(c).expect("nonsingular factor");
            let yt = y.transpose();
            let zz = l.solve_lower_triangular(&yt).expect("nonsingular factor");
            (&zz + zz.transpose()) * 0.5
        })
        .collect();
    for (a, (i, _)) in f.terms.iter().enumerate() {
        grad[*i] -= w * z[a].trace();
        for (b, (j, _)) in f.terms.iter().enumerate().skip(a) {
            let h = w * z[a].dot(&z[b]);
            hess[(*i, *j)] += h;
            if a != b {
                hess[(*j, *i)] += h;
            }
        }
    }
    Ok(())
}

fn derivatives(prog: &ConicProgram, x: &DVector<f64>, mu: f64) -> Result<(DVector<f64>, Mat<f64>)> {
    let n = prog.n_coords;
    let mut g = DVector::zeros(n);
    let mut h = Mat::<f64>::zeros(n, n);
    for (w, f) in &prog.logdet_terms {
        add_logdet_derivatives(f, *w, x, &mut g, &mut h)?;
    }
    for (_, f) in &prog.lmis {
        add_logdet_derivatives(f, mu, x, &mut g, &mut h)?;
    }
    for (_, form) in &prog.inequalities {
        let s = form.eval(x);
        for &(i, a) in &form.terms {
            g[i] -= mu * a / s;
            for &(j, b) in &form.terms {
                h[(i, j)] += mu * a * b / (s * s);
            }
        }
    }
    for &(i, j, q) in &prog.quadratic {
        g[i] += q * x[j];
        g[j] += q * x[i];
        h[(i, j)] += q;
        h[(j, i)] += q;
    }
    for &(i, c) in &prog.linear {
        g[i] += c;
    }
    Ok((g, h))
}

/// Newton direction for `min ½dᵀHd + gᵀd` subject to `E (x + d) + f = 0`;
/// the right-hand side removes any roundoff drift off the equalities.
fn newton_direction(h: Mat<f64>, g: &DVector<f64>, eq: &EqualitySystem, x: &DVector<f64>) -> Result<DVector<f64>> {
    if eq.is_empty() {
        return unconstrained_direction(h, g);
    }
    // Symmetric Jacobi scaling first: barrier rows near their boundary make
    // the diagonal span many orders of magnitude.
    let n = g.len();
    let p = eq.e.nrows();
    let d: Vec<f64> = (0..n).map(|i| 1.0 / h[(i, i)].abs().max(1e-300).sqrt()).collect();
    let mut kkt = Mat::<f64>::zeros(n + p, n + p);
    for j in 0..n {
        for i in 0..n {
            kkt[(i, j)] = d[i] * h[(i, j)] * d[j];
        }
    }
    for k in 0..p {
        for i in 0..n {
            let v = eq.e[(k, i)] * d[i];
            kkt[(n + k, i)] = v;
            kkt[(i, n + k)] = v;
        }
    }
    let r = &eq.e * x + &eq.f;
    let rhs = Mat::<f64>::from_fn(n + p, 1, |i, _| if i < n { -d[i] * g[i] } else { -r[i - n] });
    let lblt = kkt.lblt(Side::Lower);
    let mut sol = lblt.solve(&rhs);
    // Two rounds of iterative refinement keep the equality rows at roundoff.
    for _ in 0..2 {
        let resid = &rhs - &kkt * &sol;
        sol += lblt.solve(&resid);
    }
    let dx = DVector::from_fn(n, |i, _| d[i] * sol[(i, 0)]);
    if !dx.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalStall("equality-constrained Newton system is singular".into()));
    }
    Ok(dx)
}

fn unconstrained_direction(h: Mat<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let n = g.len();
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(1.0, f64::max);
    let mut delta = 0.0;
    let mut hr = h;
    let chol = loop {
        if let Ok(c) = hr.llt(Side::Lower) {
            break c;
        }
        let bump = if delta == 0.0 { 1e-14 * scale } else { delta * 99.0 };
        for i in 0..n {
            hr[(i, i)] += bump;
        }
        delta += bump;
        if delta > 1e-2 * scale {
            return Err(Error::NumericalStall("Newton system is singular".into()));
        }
    };
    let rhs = Mat::<f64>::from_fn(n, 1, |i, _| -g[i]);
    let d0 = chol.solve(&rhs);
    Ok(DVector::from_fn(n, |i, _| d0[(i, 0)]))
}

/// Damped Newton on `f₀ + μ·barrier` from a strictly feasible `x`.
fn newton_stage(
    prog: &ConicProgram,
    x: &mut DVector<f64>,
    mu: f64,
    opts: &BarrierOptions,
    eq: &EqualitySystem,
    stop: Option<&dyn Fn(&DVector<f64>) -> bool>,
) -> Result<usize> {
    let mut fx = merit(prog, x, mu).ok_or_else(|| Error::NumericalStall("start outside domain".into()))?;
    for step in 0..opts.max_newton_per_stage {
        let (g, h) = derivatives(prog, x, mu)?;
        let dx = newton_direction(h, &g, eq, x)?;
        let slope = g.dot(&dx);
        let dec = -slope;
        // The second test is the roundoff floor of the merit function.
        if dec.max(0.0).sqrt() <= opts.newton_tol || dec <= 1e-12 * fx.abs().max(1.0) {
            return Ok(step);
        }
        let mut s = 1.0;
        let accepted = loop {
            let trial = &*x + &dx * s;
            if let Some(ft) = merit(prog, &trial, mu) {
                if ft <= fx + opts.ls_alpha * s * slope {
                    break Some((trial, ft));
                }
            }
            s *= opts.ls_beta;
            if s < 1e-14 {
                break None;
            }
        };
        match accepted {
            Some((trial, ft)) => {
                // An accepted step that does not lower the merit in floating
                // point is stuck on the same roundoff floor.
                if ft >= fx && dec <= 1e-9 * fx.abs().max(1.0) {
                    *x = trial;
                    return Ok(step + 1);
                }
                *x = trial;
                fx = ft;
            }
            None => {
                // Roundoff floor: the decrement is already below what the
                // merit function can resolve.
                if dec <= 1e-9 * fx.abs().max(1.0) {
                    return Ok(step);
                }
                return Err(Error::NumericalStall(format!(
                    "line search failed at mu = {mu:.1e} with decrement {dec:.3e}"
                )));
            }
        }
        if let Some(stop) = stop {
            if stop(x) {
                return Ok(step + 1);
            }
        }
    }
    Err(Error::IterationLimit(format!(
        "no Newton convergence within {} steps at mu = {mu:.1e}",
        opts.max_newton_per_stage
    )))
}

// ---------------------------------------------------------------------------
// Gaussian SRD program

/// Posterior covariances and log-det variables of the SRD program.
#[derive(Clone, Debug, PartialEq)]
pub struct SrdSolution {
    pub p: Vec<SymMat>,
    pub pi: Vec<SymMat>,
    /// `−Σ logdet Π_t`.
    pub objective: f64,
    /// Per-step rates in nats; empty until filled by the sensor module.
    pub rates: Vec<f64>,
}

impl SrdSolution {
    /// Builds a solution from posteriors alone, taking each `Π_t` at its
    /// optimum for the given `P_t`.
    pub fn from_posteriors(model: &SystemModel, p: Vec<SymMat>) -> Result<Self> {
        let t_len = p.len();
        let pi = p
            .iter()
            .enumerate()
            .map(|(k, pk)| {
                if k + 1 < t_len {
                    schur_pi(pk, &model.a[k], &model.w[k])
                } else {
                    Ok(pk.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let objective = objective_of(&pi)?;
        Ok(SrdSolution {
            p,
            pi,
            objective,
            rates: Vec::new(),
        })
    }

    pub fn with_rates(mut self, model: &SystemModel) -> Result<Self> {
        self.rates = crate::sensor::rate_schedule(&self, model)?.per_step;
        Ok(self)
    }

    /// `{"objective", "blocks": {"P_1": …, "Pi_1": …}, "rates"}`.
    pub fn to_json(&self) -> Value {
        let mut blocks = BTreeMap::new();
        for (k, (p, pi)) in self.p.iter().zip(&self.pi).enumerate() {
            blocks.insert(format!("P_{}", k + 1), json!(p.to_rows()));
            blocks.insert(format!("Pi_{}", k + 1), json!(pi.to_rows()));
        }
        json!({
            "objective": self.objective,
            "blocks": blocks,
            "rates": self.rates,
        })
    }
}

pub fn objective_of(pi: &[SymMat]) -> Result<f64> {
    let mut f = 0.0;
    for m in pi {
        f -= chol_logdet(m)?;
    }
    Ok(f)
}

/// Largest `Π` compatible with the LMI at `P`: `(P⁻¹ + Aᵀ W⁻¹ A)⁻¹`,
/// evaluated as `P − P Aᵀ (W + A P Aᵀ)⁻¹ A P`.
pub fn schur_pi(p: &SymMat, a: &GenMat, w: &SymMat) -> Result<SymMat> {
    let ap = a * p.matrix();
    let inner = (w + &p.congruence(a)).into_matrix();
    let chol = inner.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let sol = chol.solve(&ap);
    Ok(SymMat::from_matrix(p.matrix() - ap.transpose() * sol))
}

#[derive(Clone, Copy, Debug)]
pub struct SrdOptions {
    /// Adds `P_1 ⪯ P0`.
    pub initial_constraint: bool,
}

impl Default for SrdOptions {
    fn default() -> Self {
        SrdOptions {
            initial_constraint: true,
        }
    }
}

/// Variable handles of the SRD block inside a [`ConicProgram`].
#[derive(Clone, Debug)]
pub struct SrdVars {
    pub p: Vec<VarId>,
    pub pi: Vec<VarId>,
}

pub struct SrdProgram {
    pub program: ConicProgram,
    pub vars: SrdVars,
}

/// Declares `P_t`, `Π_t` and every SRD constraint inside `prog`, plus the
/// `−logdet Π_t` objective terms.
pub fn add_srd_block(
    prog: &mut ConicProgram,
    model: &SystemModel,
    spec: &DistortionSpec,
    opts: SrdOptions,
) -> SrdVars {
    let t_len = model.horizon;
    let n = model.n();
    let p: Vec<VarId> = (1..=t_len).map(|t| prog.add_sym(&format!("P_{t}"), n)).collect();
    let pi: Vec<VarId> = (1..=t_len).map(|t| prog.add_sym(&format!("Pi_{t}"), n)).collect();
    let eye = DMatrix::<f64>::identity(n, n);
    for k in 0..t_len {
        let mut obj = AffineMatrix::zeros(n);
        obj.add_var(prog, pi[k], 1.0);
        prog.add_logdet_objective(1.0, obj);
    }
    for k in 0..t_len.saturating_sub(1) {
        let a = &model.a[k];
        // [[P − Π, PAᵀ], [AP, W + APAᵀ]] = [I; A] P [I; A]ᵀ − [I; 0] Π [I; 0]ᵀ + diag(0, W)
        let mut stack = DMatrix::zeros(2 * n, n);
        stack.view_mut((0, 0), (n, n)).copy_from(&eye);
        stack.view_mut((n, 0), (n, n)).copy_from(a);
        let mut top = DMatrix::zeros(2 * n, n);
        top.view_mut((0, 0), (n, n)).copy_from(&eye);
        let mut c = DMatrix::zeros(2 * n, 2 * n);
        c.view_mut((n, n), (n, n)).copy_from(model.w[k].matrix());
        let mut f = AffineMatrix::with_constant(c);
        f.add_congruence(prog, p[k], &stack, 1.0);
        f.add_congruence(prog, pi[k], &top, -1.0);
        prog.add_lmi(Label::new("lmi", Some(k + 1)), f);
    }
    let last = t_len - 1;
    for (a, b) in svec_pairs(n) {
        let mut e = LinearForm::new(0.0);
        e.add(prog.sym_coord(p[last], a, b), 1.0);
        e.add(prog.sym_coord(pi[last], a, b), -1.0);
        prog.add_equality(Label::new("terminal", Some(t_len)), e);
    }
    for k in 0..t_len {
        let mut g = LinearForm::new(spec.d[k]);
        g.add_sym_inner(prog, p[k], &spec.theta[k], -1.0);
        prog.add_inequality(Label::new("trace", Some(k + 1)), g);
    }
    for k in 0..t_len.saturating_sub(1) {
        let mut f = AffineMatrix::with_constant(model.w[k].matrix().clone());
        f.add_congruence(prog, p[k], &model.a[k], 1.0);
        f.add_var(prog, p[k + 1], -1.0);
        prog.add_lmi(Label::new("propagation", Some(k + 1)), f);
    }
    if opts.initial_constraint {
        let mut f = AffineMatrix::with_constant(model.p0.matrix().clone());
        f.add_var(prog, p[0], -1.0);
        prog.add_lmi(Label::new("initial", Some(1)), f);
    }
    SrdVars { p, pi }
}

pub fn build_srd_program(model: &SystemModel, spec: &DistortionSpec) -> Result<SrdProgram> {
    build_srd_program_with(model, spec, SrdOptions::default())
}

pub fn build_srd_program_with(
    model: &SystemModel,
    spec: &DistortionSpec,
    opts: SrdOptions,
) -> Result<SrdProgram> {
    crate::model::validate(model, spec).into_result()?;
    let mut program = ConicProgram::new();
    let vars = add_srd_block(&mut program, model, spec, opts);
    Ok(SrdProgram { program, vars })
}

/// Forward-propagated covariances shrunk into the strict interior of the
/// trace, propagation and initial constraints:
/// `P_1 = c_1 P0`, `P_{t+1} = c_{t+1}(A_t P_t A_tᵀ + W_t)` with
/// `c_t = (1 − ε) min(1, D_t / tr(Θ_t ·))`.
pub fn interior_start(model: &SystemModel, spec: &DistortionSpec, eps: f64) -> Vec<SymMat> {
    let mut out = Vec::with_capacity(model.horizon);
    let mut prior = model.p0.clone();
    for k in 0..model.horizon {
        let tr = spec.theta[k].dot(&prior);
        let c = (1.0 - eps) * (spec.d[k] / tr).min(1.0);
        let p = prior.scale(c);
        if k + 1 < model.horizon {
            prior = p.congruence(&model.a[k]) + &model.w[k];
        }
        out.push(p);
    }
    out
}

pub const START_SHRINK: f64 = 1e-2;

/// Solves the SRD program with the barrier method.
pub fn solve_srd(
    model: &SystemModel,
    spec: &DistortionSpec,
    srd: SrdOptions,
    opts: &BarrierOptions,
) -> Result<SrdSolution> {
    let SrdProgram { program, vars } = build_srd_program_with(model, spec, srd)?;
    let p_start = interior_start(model, spec, START_SHRINK);
    let mut x0 = DVector::zeros(program.n_coords);
    for k in 0..model.horizon {
        program.set_sym(&mut x0, vars.p[k], &p_start[k]);
        let pi = if k + 1 < model.horizon {
            schur_pi(&p_start[k], &model.a[k], &model.w[k])?.scale(1.0 - START_SHRINK)
        } else {
            p_start[k].clone()
        };
        program.set_sym(&mut x0, vars.pi[k], &pi);
    }
    let sol = solve_barrier(&program, Some(&x0), opts)?;
    let p: Vec<SymMat> = vars.p.iter().map(|&v| program.sym_value(&sol.x, v)).collect();
    let pi: Vec<SymMat> = vars.pi.iter().map(|&v| program.sym_value(&sol.x, v)).collect();
    let objective = objective_of(&pi)?;
    Ok(SrdSolution {
        p,
        pi,
        objective,
        rates: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Feasibility audit

/// Smallest margin of one constraint family and the step where it occurs.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Margin {
    pub value: f64,
    pub t: Option<usize>,
}

impl Margin {
    fn none() -> Self {
        Margin {
            value: f64::INFINITY,
            t: None,
        }
    }

    fn update(&mut self, value: f64, t: usize) {
        if value < self.value {
            *self = Margin { value, t: Some(t) };
        }
    }
}

/// Per-family minimum margins; every value `≥ −tol` means feasible.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct FeasibilityReport {
    /// `−max |P_T − Π_T|`.
    pub terminal: Margin,
    /// `λ_min(Π_t)`.
    pub pi_definite: Margin,
    pub lmi: Margin,
    /// `D_t − tr(Θ_t P_t)`.
    pub trace: Margin,
    /// `λ_min(A_t P_t A_tᵀ + W_t − P_{t+1})`.
    pub propagation: Margin,
    /// `λ_min(P0 − P_1)`.
    pub initial: Margin,
}

impl FeasibilityReport {
    pub fn families(&self) -> [(&'static str, Margin); 6] {
        [
            ("terminal", self.terminal),
            ("pi_definite", self.pi_definite),
            ("lmi", self.lmi),
            ("trace", self.trace),
            ("propagation", self.propagation),
            ("initial", self.initial),
        ]
    }

    pub fn min_margin(&self) -> f64 {
        self.families()
            .iter()
            .map(|(_, m)| m.value)
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum over every family except strict definiteness of `Π_t`,
    /// which is reported separately and is not a `−tol` condition.
    pub fn min_constraint_margin(&self) -> f64 {
        self.families()
            .iter()
            .filter(|(name, _)| *name != "pi_definite")
            .map(|(_, m)| m.value)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.min_constraint_margin() >= -tol && self.pi_definite.value > 0.0
    }
}

pub fn feasibility_report(
    sol: &SrdSolution,
    model: &SystemModel,
    spec: &DistortionSpec,
) -> Result<FeasibilityReport> {
    let t_len = model.horizon;
    if sol.p.len() != t_len || sol.pi.len() != t_len {
        return Err(Error::DimensionMismatch(format!(
            "solution has {} / {} blocks for horizon {t_len}",
            sol.p.len(),
            sol.pi.len()
        )));
    }
    let mut rep = FeasibilityReport {
        terminal: Margin {
            value: -sol.p[t_len - 1].max_abs_diff(&sol.pi[t_len - 1]),
            t: Some(t_len),
        },
        pi_definite: Margin::none(),
        lmi: Margin::none(),
        trace: Margin::none(),
        propagation: Margin::none(),
        initial: Margin {
            value: min_eigenvalue(&(&model.p0 - &sol.p[0])),
            t: Some(1),
        },
    };
    for k in 0..t_len {
        let t = k + 1;
        rep.pi_definite.update(min_eigenvalue(&sol.pi[k]), t);
        rep.trace.update(spec.d[k] - spec.theta[k].dot(&sol.p[k]), t);
        if k + 1 < t_len {
            rep.lmi
                .update(lmi_margin(&sol.p[k], &sol.pi[k], &model.a[k], &model.w[k])?, t);
            let prop = sol.p[k].congruence(&model.a[k]) + &model.w[k] - &sol.p[k + 1];
            rep.propagation.update(min_eigenvalue(&prop), t);
        }
    }
    Ok(rep)
}
