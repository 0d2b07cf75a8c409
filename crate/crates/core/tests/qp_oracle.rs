mod common;

use alip_stepper::qp::*;
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let settings = QpSettings::default();
    for _ in 0..200 {
        let p = random_qp(&mut rng);
        let (z_ref, mu_ref) = enumerate(&p).expect("feasible strictly convex QP has a solution");
        let s = solve(&p, &settings);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((&s.z - &z_ref).amax() <= 1e-7, "{} vs {}", s.z, z_ref);
        assert!(s.kkt.max() <= 1e-8, "{:?}", s.kkt);
        assert!(check_kkt(&p, &s).max() <= 1e-8);
        assert!(s.mu_in.iter().all(|m| *m >= -settings.tol));
        // The oracle's own point satisfies the residual contract too.
        let oracle = QpSolution { z: z_ref, mu_in: mu_ref, ..s.clone() };
        assert!(check_kkt(&p, &oracle).max() <= 1e-7);
    }
}

#[test]
fn hand_examples() {
    let p = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, -2.0])).unwrap();
    let s = solve(&p, &QpSettings::default());
    assert!((s.z[0] - 1.0).abs() < 1e-12 && (s.z[1] - 2.0).abs() < 1e-12);

    let p = QpProblem::inequality(
        DMatrix::from_element(1, 1, 2.0),
        DVector::from_element(1, -4.0),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let s = solve(&p, &QpSettings::default());
    assert!((s.z[0] - 1.0).abs() < 1e-12);
    assert!((s.mu_in[0] - 2.0).abs() < 1e-12);
    let exact = QpSolution { z: DVector::from_element(1, 1.0), mu_in: DVector::from_element(1, 2.0), ..s.clone() };
    assert!(check_kkt(&p, &exact).max() <= 1e-14);
    let moved = QpSolution { z: DVector::from_element(1, 1.001), ..exact.clone() };
    assert!(check_kkt(&p, &moved).stationarity > check_kkt(&p, &exact).stationarity);
}

#[test]
fn infeasible_is_reported() {
    let p = QpProblem::inequality(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
        DVector::from_vec(vec![-1.0, -1.0]),
    )
    .unwrap();
    assert_eq!(solve(&p, &QpSettings::default()).status, QpStatus::Infeasible);
}

proptest! {
    #[test]
    fn scaling_covariance_and_optimality(seed in any::<u64>(), c in 0.01..100.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng);
        let settings = QpSettings::default();
        let a = solve(&p, &settings);
        let b = solve(&p.scaled(c), &settings);
        prop_assert_eq!(a.status, QpStatus::Optimal);
        prop_assert!((&a.z - &b.z).amax() <= 10.0 * settings.tol * (1.0 + a.z.amax()));
        // Any feasible point scores no better.
        for _ in 0..20 {
            let z = DVector::from_fn(p.dim(), |_, _| rng.random_range(-2.0..2.0));
            if (&p.a_in * &z - &p.b_in).iter().all(|v| *v <= 0.0) {
                prop_assert!(p.objective(&a.z) <= p.objective(&z) + settings.tol * (1.0 + z.norm()));
            }
        }
        // Deterministic.
        prop_assert_eq!(a, solve(&p, &settings));
    }
}
