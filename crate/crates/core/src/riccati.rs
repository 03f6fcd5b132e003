//! Backward Riccati recursion for the certainty-equivalence controller and
//! the distortion weights it induces.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matcore::{min_eigenvalue, GenMat, SymMat};
use crate::model::{DistortionSpec, SystemModel};

/// Quadratic stage costs: `Q_t` for `t = 1..=T`, `R_t` for `t = 1..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqgWeights {
    pub q: Vec<SymMat>,
    pub r: Vec<SymMat>,
}

impl LqgWeights {
    /// `Q = I`, `R = I`: the per-step budget `E‖x_t‖² + ‖u_t‖²`.
    pub fn identity(horizon: usize, n: usize, m: usize) -> Self {
        LqgWeights {
            q: vec![SymMat::identity(n); horizon],
            r: vec![SymMat::identity(m); horizon.saturating_sub(1)],
        }
    }

    pub fn check(&self, model: &SystemModel) -> Result<()> {
        if self.q.len() != model.horizon || self.r.len() + 1 != model.horizon {
            return Err(Error::DimensionMismatch(format!(
                "weights cover {} / {} steps for horizon {}",
                self.q.len(),
                self.r.len(),
                model.horizon
            )));
        }
        for (k, q) in self.q.iter().enumerate() {
            if q.dim() != model.n() || min_eigenvalue(q) < -1e-12 {
                return Err(Error::InvalidParameter(format!("Q_{} must be n×n PSD", k + 1)));
            }
        }
        for (k, r) in self.r.iter().enumerate() {
            if r.dim() != model.m() || min_eigenvalue(r) <= 0.0 {
                return Err(Error::InvalidParameter(format!("R_{} must be m×m PD", k + 1)));
            }
        }
        Ok(())
    }
}

/// Output of [`backward_riccati`]. `s` has `T` entries; `k`, `theta`, `c`
/// have `T − 1` (no control is applied at the final step).
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSynthesis {
    pub s: Vec<SymMat>,
    pub k: Vec<GenMat>,
    pub theta: Vec<SymMat>,
    pub c: Vec<f64>,
}

impl ControllerSynthesis {
    /// Distortion budget for the sensing problem: `Θ_t` from the recursion
    /// (the terminal weight supplied by the caller, since no control acts at
    /// `T`), `D_t` as given and `γ_t = D_t + c_t` (`c_T = 0`).
    pub fn distortion_spec(&self, d: Vec<f64>, theta_terminal: SymMat) -> DistortionSpec {
        let mut theta = self.theta.clone();
        theta.push(theta_terminal);
        let gamma = d
            .iter()
            .enumerate()
            .map(|(k, &dk)| dk + self.c.get(k).copied().unwrap_or(0.0))
            .collect();
        DistortionSpec {
            theta,
            d,
            gamma: Some(gamma),
        }
    }
}

/// `S_T = Q_T`; for `t = T−1, …, 1`:
///
/// ```text
/// M_t = R_t + B_tᵀ S_{t+1} B_t
/// K_t = −M_t⁻¹ B_tᵀ S_{t+1} A_t
/// S_t = Q_t + A_tᵀ S_{t+1} A_t − A_tᵀ S_{t+1} B_t M_t⁻¹ B_tᵀ S_{t+1} A_t
/// Θ_t = K_tᵀ M_t K_t,   c_t = tr(W_t S_{t+1})
/// ```
pub fn backward_riccati(model: &SystemModel, weights: &LqgWeights) -> Result<ControllerSynthesis> {
    weights.check(model)?;
    let t_len = model.horizon;
    let mut s = vec![SymMat::zeros(model.n()); t_len];
    let mut k = vec![DMatrix::zeros(model.m(), model.n()); t_len - 1];
    let mut theta = vec![SymMat::zeros(model.n()); t_len - 1];
    let mut c = vec![0.0; t_len - 1];
    s[t_len - 1] = weights.q[t_len - 1].clone();
    for idx in (0..t_len - 1).rev() {
        let (a, b) = (&model.a[idx], &model.b[idx]);
        let s_next = s[idx + 1].matrix();
        let bt_s = b.transpose() * s_next;
        let inner = SymMat::from_matrix(weights.r[idx].matrix() + &bt_s * b);
        let chol = inner
            .matrix()
            .clone()
            .cholesky()
            .ok_or(Error::SingularInnerMatrix(idx + 1))?;
        let gain = -chol.solve(&(&bt_s * a));
        let s_now = weights.q[idx].matrix() + a.transpose() * s_next * a
            + a.transpose() * bt_s.transpose() * &gain;
        theta[idx] = SymMat::from_matrix(gain.transpose() * inner.matrix() * &gain);
        c[idx] = model.w[idx].dot(&s[idx + 1]);
        s[idx] = SymMat::from_matrix(s_now);
        k[idx] = gain;
    }
    Ok(ControllerSynthesis { s, k, theta, c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(a: f64, b: f64, w: f64, t: usize) -> SystemModel {
        SystemModel::time_invariant(
            t,
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            SymMat::from_diagonal(&[w]),
            SymMat::identity(1),
        )
    }

    #[test]
    fn hand_evaluated_scalar_recursion() {
        let model = scalar_model(1.0, 1.0, 0.3, 2);
        let syn = backward_riccati(&model, &LqgWeights::identity(2, 1, 1)).unwrap();
        assert_eq!(syn.s[1][(0, 0)], 1.0);
        assert!((syn.k[0][(0, 0)] + 0.5).abs() < 1e-15);
        assert!((syn.s[0][(0, 0)] - 1.5).abs() < 1e-15);
        assert!((syn.theta[0][(0, 0)] - 0.5).abs() < 1e-15);
        assert!((syn.c[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn no_control_authority_gives_lyapunov_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let model = SystemModel::time_invariant(
            5,
            a.clone(),
            DMatrix::zeros(2, 1),
            SymMat::scaled_identity(2, 0.1),
            SymMat::identity(2),
        );
        let syn = backward_riccati(&model, &LqgWeights::identity(5, 2, 1)).unwrap();
        for idx in 0..4 {
            assert_eq!(syn.k[idx].amax(), 0.0);
            assert_eq!(syn.theta[idx].matrix().amax(), 0.0);
            let lyap = SymMat::identity(2) + syn.s[idx + 1].congruence_t(&a);
            assert!(syn.s[idx].max_abs_diff(&lyap) < 1e-12);
        }
    }

    #[test]
    fn value_and_weights_stay_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (n, m) = (rng.random_range(1..4), rng.random_range(1..4));
            let t = rng.random_range(2..12);
            let model = SystemModel::time_invariant(
                t,
                DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.5..1.5)),
                DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0)),
                SymMat::scaled_identity(n, 0.2),
                SymMat::identity(n),
            );
            let syn = backward_riccati(&model, &LqgWeights::identity(t, n, m)).unwrap();
            for s in &syn.s {
                assert!(min_eigenvalue(s) >= -1e-9);
            }
            for th in &syn.theta {
                assert!(min_eigenvalue(th) >= -1e-9);
            }
        }
    }

    #[test]
    fn weights_must_match_horizon() {
        let model = scalar_model(1.0, 1.0, 0.1, 4);
        let w = LqgWeights::identity(3, 1, 1);
        assert!(matches!(backward_riccati(&model, &w), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn budget_assembly_adds_noise_cost() {
        let model = scalar_model(1.0, 1.0, 0.3, 3);
        let syn = backward_riccati(&model, &LqgWeights::identity(3, 1, 1)).unwrap();
        let spec = syn.distortion_spec(vec![0.2, 0.2, 0.2], SymMat::identity(1));
        let g = spec.gamma.unwrap();
        assert!((g[0] - (0.2 + syn.c[0])).abs() < 1e-15);
        assert_eq!(g[2], 0.2);
        assert_eq!(spec.theta.len(), 3);
    }
}
