use minfo_core::central::{solve_srd, BarrierOptions, SrdOptions};
use minfo_core::model::SystemModel;
use minfo_core::riccati::{backward_riccati, LqgWeights};
use minfo_core::sensor::{reconstruct_sensor, simulate_trials, stage_costs, StepStatistics};
use minfo_core::SymMat;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// With `u_t = K_t z_t` the cost splits step by step as
/// `x_tᵀQx_t + u_tᵀRu_t + x_{t+1}ᵀS_{t+1}x_{t+1} − x_tᵀS_tx_t`, whose mean is
/// `tr(W_t S_{t+1}) + tr(Θ_t P_{t|t}) ≤ c_t + D_t = γ_t`.
#[test]
fn certainty_equivalence_cost_stays_within_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, t) = (2, 12);
    let model = SystemModel::time_invariant(
        t,
        DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(n, n) * 0.5,
        DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.3..0.3)),
        SymMat::scaled_identity(n, 0.2),
        SymMat::identity(n),
    );
    let weights = LqgWeights::identity(t, n, n);
    let syn = backward_riccati(&model, &weights).unwrap();
    let d: Vec<f64> = (0..t).map(|k| if k % 4 < 2 { 0.15 } else { 0.6 }).collect();
    let spec = syn.distortion_spec(d, SymMat::identity(n));
    let gamma = spec.gamma.clone().unwrap();
    let sol = solve_srd(&model, &spec, SrdOptions::default(), &BarrierOptions::default()).unwrap();
    let sensor = reconstruct_sensor(&sol, &model).unwrap();
    let trials = simulate_trials(&model, &sensor, &syn, 20_000, 3).unwrap();

    let quad = |s: &SymMat, x: &nalgebra::DVector<f64>| (x.transpose() * s.matrix() * x)[(0, 0)];
    let adjusted: Vec<Vec<f64>> = trials
        .iter()
        .map(|tr| {
            let c = stage_costs(tr, &weights);
            (0..t)
                .map(|k| {
                    let next = if k + 1 < t { quad(&syn.s[k + 1], &tr.x[k + 1]) } else { 0.0 };
                    c[k] + next - quad(&syn.s[k], &tr.x[k])
                })
                .collect()
        })
        .collect();
    let stats = StepStatistics::from_samples(&adjusted);
    for k in 0..t {
        assert!(
            stats.mean[k] <= gamma[k] + 3.0 * stats.se[k],
            "step {}: {} > {} + 3·{}",
            k + 1,
            stats.mean[k],
            gamma[k],
            stats.se[k]
        );
    }

    let totals: Vec<Vec<f64>> = trials.iter().map(|tr| vec![stage_costs(tr, &weights).iter().sum()]).collect();
    let total = StepStatistics::from_samples(&totals);
    let bound = syn.s[0].dot(&model.p0) + gamma.iter().sum::<f64>();
    assert!(total.mean[0] <= bound + 3.0 * total.se[0]);
}
