#![allow(dead_code)]

use minfo_core::matcore::SymMat;
use minfo_core::model::{satellite_model, DistortionSpec, SatelliteParams, SystemModel};
use minfo_core::riccati::LqgWeights;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> SymMat {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    SymMat::from_matrix(&l * l.transpose() * 0.5 + DMatrix::identity(n, n) * floor)
}

/// Random time-invariant SRD instance with budgets drawn around the
/// open-loop prior traces, so some trace constraints bind and some do not.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, t: usize) -> (SystemModel, DistortionSpec) {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.8..0.8)) + DMatrix::identity(n, n) * 0.4;
    let model = SystemModel::time_invariant(
        t,
        a,
        DMatrix::zeros(n, 1),
        random_spd(rng, n, 0.1),
        random_spd(rng, n, 0.3),
    );
    let theta = random_spd(rng, n, 0.5);
    let priors = model.open_loop_priors();
    let d = priors
        .iter()
        .map(|p| theta.dot(p) * rng.random_range(0.2..1.2))
        .collect();
    let spec = DistortionSpec {
        theta: vec![theta; t],
        d,
        gamma: None,
    };
    (model, spec)
}

pub fn desk_satellite(t: usize) -> (SystemModel, DistortionSpec) {
    let params = SatelliteParams {
        omega0: 0.5,
        inertia: [2.0, 1.5, 1.0],
        dt: 0.05,
        sigma_b: 0.5,
        horizon: t,
    };
    let model = satellite_model(&params, SymMat::identity(3)).unwrap();
    let d = (0..t).map(|k| if (k / 25) % 2 == 0 { 0.3 } else { 0.8 }).collect();
    let spec = DistortionSpec {
        theta: vec![SymMat::identity(3); t],
        d,
        gamma: None,
    };
    (model, spec)
}

/// Brute-force optimum of the scalar SRD program by dynamic programming
/// over a log-spaced grid of posterior variances.
///
/// Stage cost is `−log Π_t` with `Π_t = p w / (a² p + w)` for `t < T` and
/// `Π_T = p_T`; feasible transitions are `p_{t+1} ≤ a² p_t + w`, and each
/// `p_t` is capped by `D_t / θ_t` (and `P0` at `t = 1`). Grid values sit at
/// or above the true optimum.
pub fn scalar_grid_oracle(model: &SystemModel, spec: &DistortionSpec, points: usize) -> f64 {
    let t_len = model.horizon;
    let a2 = |k: usize| model.a[k][(0, 0)].powi(2);
    let w = |k: usize| model.w[k][(0, 0)];
    let cap = |k: usize| {
        let c = spec.d[k] / spec.theta[k][(0, 0)];
        if k == 0 {
            c.min(model.p0[(0, 0)])
        } else {
            c
        }
    };
    let grid = |k: usize| -> Vec<f64> {
        let hi = cap(k);
        let lo = hi * 1e-4;
        let r = (hi / lo).ln();
        (0..points)
            .map(|i| lo * (r * i as f64 / (points - 1) as f64).exp())
            .collect()
    };
    let stage = |k: usize, p: f64| {
        if k + 1 < t_len {
            -(p * w(k) / (a2(k) * p + w(k))).ln()
        } else {
            -p.ln()
        }
    };
    // value[i] = best cost of steps k..T given p_k = grid_k[i]
    let mut next_grid = grid(t_len - 1);
    let mut value: Vec<f64> = next_grid.iter().map(|&p| stage(t_len - 1, p)).collect();
    for k in (0..t_len - 1).rev() {
        let mut prefix = value.clone();
        for i in 1..prefix.len() {
            prefix[i] = prefix[i].min(prefix[i - 1]);
        }
        let g = grid(k);
        let mut j = 0usize;
        let mut cur = Vec::with_capacity(points);
        for &p in &g {
            let reach = a2(k) * p + w(k);
            while j < next_grid.len() && next_grid[j] <= reach {
                j += 1;
            }
            let best = if j == 0 { f64::INFINITY } else { prefix[j - 1] };
            cur.push(stage(k, p) + best);
        }
        value = cur;
        next_grid = g;
    }
    value.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Batch least-squares form of the noiseless problem: stacking the states as
/// `x = Φ x₁ + Γ u` turns the cost into a quadratic in `u`, whose minimum
/// over `u` is `x₁ᵀ S₁ x₁` and whose first block row gives `K₁`.
pub fn batch_riccati_oracle(model: &SystemModel, weights: &LqgWeights) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m, t) = (model.n(), model.m(), model.horizon);
    let mut phi = DMatrix::zeros(n * t, n);
    let mut gamma = DMatrix::zeros(n * t, m * (t - 1));
    let mut trans = DMatrix::identity(n, n);
    for k in 0..t {
        phi.view_mut((k * n, 0), (n, n)).copy_from(&trans);
        if k + 1 < t {
            trans = &model.a[k] * trans;
        }
    }
    for j in 0..t - 1 {
        // effect of u_j on x_{j+1}, x_{j+2}, ...
        let mut e = model.b[j].clone();
        for k in j + 1..t {
            gamma.view_mut((k * n, j * m), (n, m)).copy_from(&e);
            if k + 1 < t {
                e = &model.a[k] * e;
            }
        }
    }
    let mut qbar = DMatrix::zeros(n * t, n * t);
    for k in 0..t {
        qbar.view_mut((k * n, k * n), (n, n)).copy_from(weights.q[k].matrix());
    }
    let mut rbar = DMatrix::zeros(m * (t - 1), m * (t - 1));
    for k in 0..t - 1 {
        rbar.view_mut((k * m, k * m), (m, m)).copy_from(weights.r[k].matrix());
    }
    let h = &rbar + gamma.transpose() * &qbar * &gamma;
    let cross = gamma.transpose() * &qbar * &phi;
    let h_inv = h.try_inverse().unwrap();
    let value = phi.transpose() * &qbar * &phi - cross.transpose() * &h_inv * &cross;
    let u_gain = -(&h_inv * &cross);
    (value, u_gain.rows(0, m).into_owned())
}
