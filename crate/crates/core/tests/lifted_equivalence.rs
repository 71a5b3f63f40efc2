use blocktr1::lifted::{DirectCollocationSolver, LiftedOptions, LiftedSolver};
use blocktr1::model::{chain_of_masses_with, ChainInput, ChainParams, Iterate, OcpModel};
use blocktr1::sqp::{JacobianStrategy, Tr1Variant};
use nalgebra::DVector;

fn model() -> OcpModel {
    let params = ChainParams {
        input: ChainInput::Force,
        perturbation: [-3.0, 3.0, 3.0],
        ..Default::default()
    };
    chain_of_masses_with(2, 5, 1.0, &params)
        .unwrap()
        .with_collocation_stages(2)
        .unwrap()
}

fn max_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn compare(a: &Iterate, b: &Iterate) -> f64 {
    [
        max_diff(&a.x, &b.x),
        max_diff(&a.u, &b.u),
        max_diff(&a.lambda, &b.lambda),
        max_diff(&a.mu, &b.mu),
        max_diff(a.k.as_ref().unwrap(), b.k.as_ref().unwrap()),
        max_diff(a.omega.as_ref().unwrap(), b.omega.as_ref().unwrap()),
        (&a.lambda_init - &b.lambda_init).amax(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn run_pair(strategy: JacobianStrategy, iters: usize) {
    let m = model();
    let x0 = m.x0.clone();
    let opts = LiftedOptions {
        strategy,
        ..Default::default()
    };
    let mut lifted = LiftedSolver::new(&m, m.initial_guess(), opts).unwrap();
    let mut direct = DirectCollocationSolver::new(&m, lifted.iterate.clone(), strategy, 1e-8).unwrap();
    for k in 0..iters {
        lifted.prepare().unwrap();
        let step = lifted.feedback(&x0).unwrap().step_norm;
        lifted.apply_pending_update().unwrap();
        direct.iterate(&x0).unwrap();
        if k == 0 {
            assert!(step > 1e-2, "first step {step:e}");
        }
        let diff = compare(&lifted.iterate, &direct.iterate);
        assert!(diff <= 1e-9, "{strategy} iteration {k}: {diff:e}");
        let (a, b) = lifted.max_drift();
        assert!(a <= 1e-8 && b <= 1e-8, "{strategy} drift {a:e} {b:e}");
    }
    assert_eq!(lifted.ops.refactorizations, 0);
}

#[test]
fn lifted_matches_direct_collocation_exact() {
    run_pair(JacobianStrategy::Exact, 10);
}

#[test]
fn lifted_matches_direct_collocation_tr1() {
    for v in [Tr1Variant::Forward, Tr1Variant::Adjoint, Tr1Variant::Dynamic] {
        run_pair(JacobianStrategy::BlockTr1(v), 10);
    }
}
