mod common;

use common::random_instance;
use minfo_core::central::{feasibility_report, interior_start, START_SHRINK};
use minfo_core::model::ProblemFile;
use minfo_core::sensor::rate_schedule;
use minfo_core::SrdSolution;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interior_start_is_strictly_feasible(seed in any::<u64>(), n in 1usize..4, t in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, spec) = random_instance(&mut rng, n, t);
        let p = interior_start(&model, &spec, START_SHRINK);
        let sol = SrdSolution::from_posteriors(&model, p).unwrap();
        let rep = feasibility_report(&sol, &model, &spec).unwrap();
        prop_assert!(rep.trace.value > 0.0);
        prop_assert!(rep.initial.value > 0.0);
        prop_assert!(rep.propagation.value >= 0.0);
        prop_assert!(rep.pi_definite.value > 0.0);
    }

    #[test]
    fn rates_are_nonnegative_and_sum_to_total(seed in any::<u64>(), n in 1usize..4, t in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, spec) = random_instance(&mut rng, n, t);
        let p = interior_start(&model, &spec, START_SHRINK);
        let sol = SrdSolution::from_posteriors(&model, p).unwrap();
        let r = rate_schedule(&sol, &model).unwrap();
        prop_assert!(r.per_step.iter().all(|&x| x >= 0.0));
        prop_assert!((r.per_step.iter().sum::<f64>() - r.total).abs() <= 1e-12 * r.total.max(1.0));
    }

    #[test]
    fn problem_file_round_trips(seed in any::<u64>(), n in 1usize..4, t in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, spec) = random_instance(&mut rng, n, t.max(2));
        let text = serde_json::to_string(&ProblemFile::from_model(&model, &spec)).unwrap();
        let file: ProblemFile = serde_json::from_str(&text).unwrap();
        let (m2, s2) = file.into_model().unwrap();
        prop_assert_eq!(m2, model);
        prop_assert_eq!(s2.d, spec.d);
        prop_assert_eq!(s2.theta, spec.theta);
    }
}
