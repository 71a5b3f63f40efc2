mod common;

use blocktr1::qp::{qp_kkt_residual, solve_qp, QpOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for k in 0..200 {
        let (stages, d0) = common::random_qp(&mut rng, 6);
        let (best, dw) = common::brute_force(&stages, &d0).expect("feasible instance");
        let sol = solve_qp(&stages, &d0, None, &QpOptions::default()).unwrap();
        assert!((sol.objective - best).abs() <= 1e-9 * (1.0 + best.abs()), "instance {k}: {} vs {best}", sol.objective);
        let diff = sol.dw.iter().zip(&dw).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(diff <= 1e-8, "instance {k}: step differs by {diff:e}");
        assert!(qp_kkt_residual(&stages, &d0, &sol) <= 1e-9);
    }
}

#[test]
fn warm_start_from_the_optimal_set_takes_no_extra_work() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (stages, d0) = common::random_qp(&mut rng, 6);
        let cold = solve_qp(&stages, &d0, None, &QpOptions::default()).unwrap();
        let warm = solve_qp(&stages, &d0, Some(&cold.active_set), &QpOptions::default()).unwrap();
        assert!((cold.objective - warm.objective).abs() <= 1e-10 * (1.0 + cold.objective.abs()));
        assert!(warm.iterations <= 1, "{} iterations", warm.iterations);
    }
}
