use nlsctrl::dynamics::ProblemParams;
use nlsctrl::fields::Builtin;
use nlsctrl::saturation::{build_ladder, saturation_verdict};
use nlsctrl::spectral::{build_operator, grid_to_modal, modal_to_grid, laplacian_eigenvalue, ModalState, SampledField, C64};
use proptest::prelude::*;

fn smooth_potential(m: usize, a: &[f64]) -> SampledField {
    SampledField::from_fn(m, |x| a.iter().enumerate().map(|(j, c)| c * (j as f64 * std::f64::consts::PI * x).cos()).sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constant_shift_moves_every_eigenvalue(a in prop::collection::vec(-5.0f64..5.0, 3), c in -50.0f64..50.0) {
        let n = 12;
        let v = smooth_potential(4 * n, &a);
        let base = build_operator(&v, n).unwrap();
        let shifted = build_operator(&v.map(|x| x + c), n).unwrap();
        for k in 1..=n {
            let d = shifted.eigenvalue(k) - base.eigenvalue(k) - c;
            prop_assert!(d.abs() <= 1e-12 * (1.0 + shifted.eigenvalue(k).abs()), "k={} d={}", k, d);
        }
    }

    #[test]
    fn eigenvalues_sorted_and_basis_orthonormal(a in prop::collection::vec(-20.0f64..20.0, 4)) {
        let n = 12;
        let op = build_operator(&smooth_potential(4 * n, &a), n).unwrap();
        prop_assert!(op.eigenvalues().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(op.orthonormality_defect() < 1e-12);
        prop_assert!(op.ground_state().coeff(1).re > 0.0);
    }

    #[test]
    fn modal_grid_round_trip(re in prop::collection::vec(-1.0f64..1.0, 10), im in prop::collection::vec(-1.0f64..1.0, 10)) {
        let s = ModalState::new(re.iter().zip(&im).map(|(&a, &b)| C64::new(a, b)).collect());
        let back = grid_to_modal(&modal_to_grid(&s, 40).unwrap(), 10).unwrap();
        prop_assert!((&back - &s).norm_l2() < 1e-13);
    }

    #[test]
    fn h3_norm_dominates_l2(re in prop::collection::vec(-1.0f64..1.0, 8)) {
        let s = ModalState::from_real(&re);
        prop_assert!(s.sobolev_norm(3.0) + 1e-15 >= laplacian_eigenvalue(1).powf(1.5) * s.norm_l2());
    }
}

#[test]
fn free_spectrum_is_exact() {
    let op = build_operator(&SampledField::zeros(64), 16).unwrap();
    for k in 1..=8 {
        let want = laplacian_eigenvalue(k);
        assert!((op.eigenvalue(k) - want).abs() <= 1e-10 * want);
    }
}

#[test]
fn ladder_ranks_never_decrease() {
    for kappa in [0.5, 2.0, -1.0] {
        let p = ProblemParams::standard(kappa, 8).unwrap();
        let ladder = build_ladder(&p, 16, 1e-8);
        assert!(ladder.ranks.windows(2).all(|w| w[0] <= w[1]), "{:?}", ladder.ranks);
        assert!(ladder.inclusion_defect() < 1e-8);
        let v = saturation_verdict(&ladder, &p, 1e-8);
        assert_eq!(v.tangent_rank, 15);
    }
}

#[test]
fn uncoupled_problem_does_not_saturate() {
    let m = 64;
    let p = ProblemParams::standard(0.5, 16)
        .unwrap()
        .with_coupling(SampledField::zeros(m))
        .unwrap()
        .with_fields(vec![Builtin::One.sample(m), Builtin::CosPi.sample(m)])
        .unwrap();
    let v = saturation_verdict(&build_ladder(&p, 16, 1e-8), &p, 1e-8);
    assert!(!v.saturating);
    assert!(v.missed.is_some());
}
