//! Time-varying linear-Gaussian systems, distortion budgets, JSON ingestion
//! and the spin-stabilized satellite generator.
//!
//! Time indexing: states and posterior covariances run over steps
//! `t = 1..=T`. Per-step sequences are stored zero-based, so element `k`
//! of `a`, `b`, `w` describes the transition from step `k + 1` to `k + 2`,
//! and element `k` of `theta`/`d` describes step `k + 1`. The prior at the
//! first measurement is `P_{1|0} = P0`.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{gen_from_rows, gen_to_rows, min_eigenvalue, GenMat, SymMat};

/// `x_{t+1} = A_t x_t + B_t u_t + w_t`, `w_t ~ N(0, W_t)`, `x_1 ~ N(0, P0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    pub horizon: usize,
    /// `T − 1` dynamics matrices, n×n.
    pub a: Vec<GenMat>,
    /// `T − 1` input matrices, n×m.
    pub b: Vec<GenMat>,
    /// `T − 1` process-noise covariances.
    pub w: Vec<SymMat>,
    pub p0: SymMat,
}

impl SystemModel {
    /// Time-invariant model with the same `(A, B, W)` at every transition.
    pub fn time_invariant(horizon: usize, a: GenMat, b: GenMat, w: SymMat, p0: SymMat) -> Self {
        let steps = horizon.saturating_sub(1);
        SystemModel {
            horizon,
            a: vec![a; steps],
            b: vec![b; steps],
            w: vec![w; steps],
            p0,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.p0.dim()
    }

    pub fn m(&self) -> usize {
        self.b.first().map(|b| b.ncols()).unwrap_or(0)
    }

    /// Forward-propagated prior covariances `P_{t|t-1}` with no measurements.
    pub fn open_loop_priors(&self) -> Vec<SymMat> {
        let mut out = Vec::with_capacity(self.horizon);
        let mut p = self.p0.clone();
        for k in 0..self.horizon {
            out.push(p.clone());
            if k + 1 < self.horizon {
                p = p.congruence(&self.a[k]) + &self.w[k];
            }
        }
        out
    }
}

/// Weighted-error budgets `tr(Θ_t P_{t|t}) ≤ D_t` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionSpec {
    pub theta: Vec<SymMat>,
    pub d: Vec<f64>,
    /// Per-step control budgets `γ_t = D_t + c_t`, when known.
    pub gamma: Option<Vec<f64>>,
}

impl DistortionSpec {
    pub fn uniform(horizon: usize, theta: SymMat, d: f64) -> Self {
        DistortionSpec {
            theta: vec![theta; horizon],
            d: vec![d; horizon],
            gamma: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Invariant {
    HorizonPositive,
    DimensionMismatch,
    SequenceLength,
    NoiseNotPositiveDefinite,
    PriorNotPositiveDefinite,
    WeightNotPositiveDefinite,
    BudgetNotPositive,
    NonFinite,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    /// Step `t` (1-based) the finding refers to, if any.
    pub t: Option<usize>,
    pub invariant: Invariant,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.t {
            Some(t) => write!(f, "t={t}: {:?}: {}", self.invariant, self.detail),
            None => write!(f, "{:?}: {}", self.invariant, self.detail),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }

    fn push(&mut self, t: Option<usize>, invariant: Invariant, detail: impl Into<String>) {
        self.findings.push(Finding {
            t,
            invariant,
            detail: detail.into(),
        });
    }

    /// `Ok(())` when valid, otherwise an `InvalidModel` error listing every finding.
    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let msg = self
            .findings
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidModel(msg))
    }
}

/// Checks every structural and definiteness invariant of the model and budget.
pub fn validate(model: &SystemModel, spec: &DistortionSpec) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let t_len = model.horizon;
    if t_len == 0 {
        rep.push(None, Invariant::HorizonPositive, "horizon T must be at least 1");
        return rep;
    }
    let n = model.n();
    let steps = t_len - 1;
    for (name, len) in [("A", model.a.len()), ("B", model.b.len()), ("W", model.w.len())] {
        if len < steps {
            rep.push(
                None,
                Invariant::SequenceLength,
                format!("{name} has {len} entries, need {steps}"),
            );
        }
    }
    for (name, len) in [("Theta", spec.theta.len()), ("D", spec.d.len())] {
        if len != t_len {
            rep.push(
                None,
                Invariant::SequenceLength,
                format!("{name} has {len} entries, need {t_len}"),
            );
        }
    }
    if !model.p0.is_finite() {
        rep.push(None, Invariant::NonFinite, "P0 has non-finite entries");
    } else if min_eigenvalue(&model.p0) <= 0.0 {
        rep.push(None, Invariant::PriorNotPositiveDefinite, "P0 must be positive definite");
    }
    let m = model.m();
    for k in 0..steps.min(model.a.len()) {
        let t = Some(k + 1);
        if model.a[k].shape() != (n, n) {
            rep.push(
                t,
                Invariant::DimensionMismatch,
                format!("A is {:?}, expected ({n}, {n})", model.a[k].shape()),
            );
        }
        if let Some(b) = model.b.get(k) {
            if b.nrows() != n || b.ncols() != m {
                rep.push(
                    t,
                    Invariant::DimensionMismatch,
                    format!("B is {:?}, expected ({n}, {m})", b.shape()),
                );
            }
        }
        if let Some(w) = model.w.get(k) {
            if w.dim() != n {
                rep.push(t, Invariant::DimensionMismatch, format!("W is {0}x{0}, expected {n}", w.dim()));
            } else if !w.is_finite() {
                rep.push(t, Invariant::NonFinite, "W has non-finite entries");
            } else {
                let e = min_eigenvalue(w);
                if e <= 0.0 {
                    rep.push(
                        t,
                        Invariant::NoiseNotPositiveDefinite,
                        format!("W has minimum eigenvalue {e:.3e}"),
                    );
                }
            }
        }
    }
    for (k, th) in spec.theta.iter().enumerate() {
        let t = Some(k + 1);
        if th.dim() != n {
            rep.push(t, Invariant::DimensionMismatch, format!("Theta is {0}x{0}, expected {n}", th.dim()));
        } else if min_eigenvalue(th) <= 0.0 {
            rep.push(t, Invariant::WeightNotPositiveDefinite, "Theta must be positive definite");
        }
    }
    for (k, &d) in spec.d.iter().enumerate() {
        if !(d.is_finite() && d > 0.0) {
            rep.push(Some(k + 1), Invariant::BudgetNotPositive, format!("D = {d} must be positive"));
        }
    }
    rep
}

/// Physical parameters of the linearized spin-stabilized satellite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatelliteParams {
    /// Nominal spin rate about the first axis (rad/s).
    pub omega0: f64,
    /// Principal moments of inertia `(I1, I2, I3)` (kg·m²).
    pub inertia: [f64; 3],
    /// Discretization step (s).
    pub dt: f64,
    /// Disturbance intensity; `W = σ_b² dt I`.
    pub sigma_b: f64,
    pub horizon: usize,
}

/// Continuous-time coupling matrix of the satellite angular-velocity dynamics.
///
/// Implemented verbatim, including the unit diagonal.
pub fn satellite_generator(omega0: f64, inertia: [f64; 3]) -> GenMat {
    let [i1, i2, i3] = inertia;
    let mut m = DMatrix::identity(3, 3);
    m[(1, 2)] = (i3 - i1) / i2 * omega0;
    m[(2, 1)] = (i1 - i2) / i3 * omega0;
    m
}

/// Forward-Euler discretization `A = I + M dt`, `W = σ_b² dt I`, `B = 0`
/// (a single zero input column; the satellite study is sensing-only).
pub fn satellite_model(params: &SatelliteParams, p0: SymMat) -> Result<SystemModel> {
    let SatelliteParams {
        omega0,
        inertia,
        dt,
        sigma_b,
        horizon,
    } = *params;
    if inertia.iter().any(|&i| !(i > 0.0)) {
        return Err(Error::InvalidParameter(format!("inertias must be positive, got {inertia:?}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if !(sigma_b > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma_b must be positive, got {sigma_b}")));
    }
    if horizon < 2 {
        return Err(Error::InvalidParameter(format!("horizon must be at least 2, got {horizon}")));
    }
    if p0.dim() != 3 {
        return Err(Error::DimensionMismatch("satellite P0 must be 3x3".into()));
    }
    let a = DMatrix::identity(3, 3) + satellite_generator(omega0, inertia) * dt;
    let w = SymMat::scaled_identity(3, sigma_b * sigma_b * dt);
    Ok(SystemModel::time_invariant(horizon, a, DMatrix::zeros(3, 1), w, p0))
}

/// Seeded random instance for timing studies: `A = 0.95·Q` with `Q`
/// orthogonal, so priors stay bounded at long horizons, random SPD `W`,
/// `P0 = Θ = I`, and budgets between 0.3 and 0.9 of the open-loop prior
/// trace.
pub fn synthetic_instance(n: usize, horizon: usize, seed: u64) -> Result<(SystemModel, DistortionSpec)> {
    use rand::{Rng, SeedableRng};
    if n == 0 || horizon < 2 {
        return Err(Error::InvalidParameter(format!("need n >= 1 and T >= 2, got n = {n}, T = {horizon}")));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let a = g.qr().q() * 0.95;
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
    let w = SymMat::from_matrix(&l * l.transpose() + DMatrix::identity(n, n) * 0.1);
    let model = SystemModel::time_invariant(horizon, a, DMatrix::zeros(n, 1), w, SymMat::identity(n));
    let d = model
        .open_loop_priors()
        .iter()
        .map(|p| p.trace() * rng.random_range(0.3..0.9))
        .collect();
    let spec = DistortionSpec {
        theta: vec![SymMat::identity(n); horizon],
        d,
        gamma: None,
    };
    Ok((model, spec))
}

// ---------------------------------------------------------------------------
// JSON ingestion

/// A matrix given once (time-invariant) or once per step.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatSeq {
    Single(Vec<Vec<f64>>),
    PerStep(Vec<Vec<Vec<f64>>>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarSeq {
    Single(f64),
    PerStep(Vec<f64>),
}

/// On-disk schema for a model plus its distortion budget.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: MatSeq,
    #[serde(rename = "B")]
    pub b: MatSeq,
    #[serde(rename = "W")]
    pub w: MatSeq,
    #[serde(rename = "P0")]
    pub p0: Vec<Vec<f64>>,
    #[serde(rename = "Theta")]
    pub theta: MatSeq,
    #[serde(rename = "D")]
    pub d: ScalarSeq,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<ScalarSeq>,
}

fn expand_mats(seq: &MatSeq, len: usize, name: &str) -> Result<Vec<GenMat>> {
    match seq {
        MatSeq::Single(rows) => {
            let m = gen_from_rows(rows)?;
            Ok(vec![m; len])
        }
        MatSeq::PerStep(list) => {
            if list.len() < len {
                return Err(Error::DimensionMismatch(format!(
                    "{name} lists {} matrices, need {len}",
                    list.len()
                )));
            }
            list.iter().take(len).map(|r| gen_from_rows(r)).collect()
        }
    }
}

fn expand_scalars(seq: &ScalarSeq, len: usize, name: &str) -> Result<Vec<f64>> {
    match seq {
        ScalarSeq::Single(v) => Ok(vec![*v; len]),
        ScalarSeq::PerStep(v) if v.len() >= len => Ok(v[..len].to_vec()),
        ScalarSeq::PerStep(v) => Err(Error::DimensionMismatch(format!(
            "{name} lists {} values, need {len}",
            v.len()
        ))),
    }
}

fn to_sym(m: GenMat, name: &str) -> Result<SymMat> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!("{name} must be square")));
    }
    Ok(SymMat::from_matrix(m))
}

impl ProblemFile {
    pub fn into_model(&self) -> Result<(SystemModel, DistortionSpec)> {
        let t = self.horizon;
        if t == 0 {
            return Err(Error::InvalidModel("T must be at least 1".into()));
        }
        let steps = t - 1;
        let a = expand_mats(&self.a, steps, "A")?;
        let b = expand_mats(&self.b, steps, "B")?;
        let w = expand_mats(&self.w, steps, "W")?
            .into_iter()
            .map(|m| to_sym(m, "W"))
            .collect::<Result<Vec<_>>>()?;
        let theta = expand_mats(&self.theta, t, "Theta")?
            .into_iter()
            .map(|m| to_sym(m, "Theta"))
            .collect::<Result<Vec<_>>>()?;
        let p0 = to_sym(gen_from_rows(&self.p0)?, "P0")?;
        if p0.dim() != self.n {
            return Err(Error::DimensionMismatch(format!("P0 is {0}x{0} but n = {1}", p0.dim(), self.n)));
        }
        if let Some(b0) = b.first() {
            if b0.ncols() != self.m {
                return Err(Error::DimensionMismatch(format!("B has {} columns but m = {}", b0.ncols(), self.m)));
            }
        }
        let d = expand_scalars(&self.d, t, "D")?;
        let gamma = self
            .gamma
            .as_ref()
            .map(|g| expand_scalars(g, t, "gamma"))
            .transpose()?;
        let model = SystemModel {
            horizon: t,
            a,
            b,
            w,
            p0,
        };
        let spec = DistortionSpec { theta, d, gamma };
        validate(&model, &spec).into_result()?;
        Ok((model, spec))
    }

    /// Per-step serialization of an in-memory model and budget.
    pub fn from_model(model: &SystemModel, spec: &DistortionSpec) -> Self {
        let per_step = |ms: Vec<Vec<Vec<f64>>>| MatSeq::PerStep(ms);
        ProblemFile {
            horizon: model.horizon,
            n: model.n(),
            m: model.m().max(1),
            a: per_step(model.a.iter().map(gen_to_rows).collect()),
            b: per_step(model.b.iter().map(gen_to_rows).collect()),
            w: per_step(model.w.iter().map(SymMat::to_rows).collect()),
            p0: model.p0.to_rows(),
            theta: per_step(spec.theta.iter().map(SymMat::to_rows).collect()),
            d: ScalarSeq::PerStep(spec.d.clone()),
            gamma: spec.gamma.clone().map(ScalarSeq::PerStep),
        }
    }
}

pub fn parse_problem(json: &str) -> Result<(SystemModel, DistortionSpec)> {
    let file: ProblemFile = serde_json::from_str(json)?;
    file.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SatelliteParams {
        SatelliteParams {
            omega0: 0.7,
            inertia: [2.0, 1.5, 1.0],
            dt: 0.05,
            sigma_b: 0.4,
            horizon: 10,
        }
    }

    fn small_model() -> (SystemModel, DistortionSpec) {
        let model = satellite_model(&params(), SymMat::identity(3)).unwrap();
        let spec = DistortionSpec::uniform(10, SymMat::identity(3), 0.5);
        (model, spec)
    }

    #[test]
    fn valid_model_has_empty_report() {
        let (model, spec) = small_model();
        assert!(validate(&model, &spec).is_valid());
    }

    #[test]
    fn singular_noise_is_reported_at_its_step() {
        let (mut model, spec) = small_model();
        model.w[3] = SymMat::from_diagonal(&[1.0, 0.0, 1.0]);
        let rep = validate(&model, &spec);
        assert_eq!(rep.findings.len(), 1);
        assert_eq!(rep.findings[0].t, Some(4));
        assert_eq!(rep.findings[0].invariant, Invariant::NoiseNotPositiveDefinite);
    }

    #[test]
    fn mismatched_dynamics_dimension_is_reported() {
        let (mut model, spec) = small_model();
        model.a[5] = DMatrix::identity(2, 2);
        let rep = validate(&model, &spec);
        assert!(rep
            .findings
            .iter()
            .any(|f| f.t == Some(6) && f.invariant == Invariant::DimensionMismatch));
    }

    #[test]
    fn nonpositive_budget_is_reported() {
        let (model, mut spec) = small_model();
        spec.d[0] = 0.0;
        let rep = validate(&model, &spec);
        assert_eq!(rep.findings[0].invariant, Invariant::BudgetNotPositive);
        assert!(rep.into_result().is_err());
    }

    #[test]
    fn zero_spin_decouples_axes() {
        let mut p = params();
        p.omega0 = 0.0;
        let m = satellite_model(&p, SymMat::identity(3)).unwrap();
        let expected = DMatrix::identity(3, 3) * (1.0 + p.dt);
        assert_eq!(m.a[0], expected);
    }

    #[test]
    fn symmetric_body_has_no_coupling() {
        let mut p = params();
        p.inertia = [1.3, 1.3, 1.3];
        let m = satellite_model(&p, SymMat::identity(3)).unwrap();
        assert_eq!(m.a[0][(1, 2)], 0.0);
        assert_eq!(m.a[0][(2, 1)], 0.0);
    }

    #[test]
    fn coupling_product_matches_symbolic_form() {
        let p = params();
        let m = satellite_model(&p, SymMat::identity(3)).unwrap();
        let [i1, i2, i3] = p.inertia;
        let prod = m.a[0][(1, 2)] * m.a[0][(2, 1)];
        let expected = p.dt * p.dt * p.omega0 * p.omega0 * (i3 - i1) * (i1 - i2) / (i2 * i3);
        assert!((prod - expected).abs() < 1e-15);
    }

    #[test]
    fn euler_is_linear_in_dt() {
        let p = params();
        let half = SatelliteParams { dt: p.dt / 2.0, ..p.clone() };
        let full = satellite_model(&p, SymMat::identity(3)).unwrap();
        let half = satellite_model(&half, SymMat::identity(3)).unwrap();
        let i = DMatrix::<f64>::identity(3, 3);
        // Exact up to the rounding of adding and removing the identity.
        let diff = (&full.a[0] - &i) - (&half.a[0] - &i) * 2.0;
        assert!(diff.amax() <= 4.0 * f64::EPSILON, "{diff}");
    }

    #[test]
    fn satellite_rejects_bad_inertia() {
        let mut p = params();
        p.inertia[1] = 0.0;
        assert!(matches!(
            satellite_model(&p, SymMat::identity(3)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn satellite_models_always_validate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = SatelliteParams {
                omega0: rng.random_range(-2.0..2.0),
                inertia: [
                    rng.random_range(0.1..5.0),
                    rng.random_range(0.1..5.0),
                    rng.random_range(0.1..5.0),
                ],
                dt: rng.random_range(1e-3..0.5),
                sigma_b: rng.random_range(1e-2..2.0),
                horizon: rng.random_range(2..40),
            };
            let model = satellite_model(&p, SymMat::identity(3)).unwrap();
            let spec = DistortionSpec::uniform(p.horizon, SymMat::identity(3), 1.0);
            assert!(validate(&model, &spec).is_valid());
        }
    }

    #[test]
    fn json_time_invariant_and_per_step() {
        let json = r#"{"T": 3, "n": 1, "m": 1, "A": [[1.0]], "B": [[0.0]], "W": [[0.1]],
                       "P0": [[1.0]], "Theta": [[1.0]], "D": [0.4, 0.5, 0.6]}"#;
        let (model, spec) = parse_problem(json).unwrap();
        assert_eq!(model.horizon, 3);
        assert_eq!(model.a.len(), 2);
        assert_eq!(spec.d, vec![0.4, 0.5, 0.6]);

        let back = serde_json::to_string(&ProblemFile::from_model(&model, &spec)).unwrap();
        let (m2, s2) = parse_problem(&back).unwrap();
        assert_eq!(m2, model);
        assert_eq!(s2, spec);
    }

    #[test]
    fn json_errors_carry_position() {
        let err = parse_problem("{\"T\": 3,\n \"n\": }").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
