use nlsctrl::dynamics::{duhamel_linear, propagate_linear, propagate_nls, stationary_control, ControlSignal, Integrator, ProblemParams};
use nlsctrl::spectral::{ModalState, C64};
use proptest::prelude::*;

fn params(n: usize, steps: usize) -> ProblemParams {
    ProblemParams::standard(0.5, n).unwrap().with_steps(steps)
}

fn unit(coeffs: &[(f64, f64)]) -> ModalState {
    let s = ModalState::new(coeffs.iter().enumerate().map(|(k, &(a, b))| C64::new(a, b) / ((k + 1) as f64).powi(3)).collect());
    let n = s.norm_l2();
    s.scale(C64::new(1.0 / n, 0.0))
}

fn control(values: &[f64], q: usize) -> ControlSignal {
    ControlSignal::uniform(1.0, values.chunks(q).map(|c| c.to_vec()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nls_flow_keeps_unit_norm(
        coeffs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4),
        u in prop::collection::vec(-3.0f64..3.0, 16),
    ) {
        prop_assume!(coeffs.iter().map(|(a, b)| a * a + b * b).sum::<f64>() > 0.1);
        let p = params(8, 256);
        let traj = propagate_nls(&unit(&coeffs), &control(&u, 4), &p).unwrap();
        for s in &traj.snapshots {
            prop_assert!((s.norm_l2() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_flow_stays_tangent(
        re in prop::collection::vec(-1.0f64..1.0, 8),
        im in prop::collection::vec(-1.0f64..1.0, 8),
        v in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let p = params(8, 64);
        let phi = p.phi();
        let raw = ModalState::new(re.iter().zip(&im).map(|(&a, &b)| C64::new(a, b)).collect());
        let xi0 = &raw - &phi.scale(C64::new(raw.inner_l2(&phi), 0.0));
        let traj = propagate_linear(&xi0, &control(&v, 4), &p).unwrap();
        for s in &traj.snapshots {
            prop_assert!(s.inner_l2(&phi).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_flow_is_linear_in_the_control(
        a in prop::collection::vec(-1.0f64..1.0, 8),
        b in prop::collection::vec(-1.0f64..1.0, 8),
        s in -2.0f64..2.0,
    ) {
        let p = params(8, 64);
        let z = ModalState::zeros(8);
        let (ua, ub) = (control(&a, 4), control(&b, 4));
        let xa = propagate_linear(&z, &ua, &p).unwrap().terminal().clone();
        let xb = propagate_linear(&z, &ub, &p).unwrap().terminal().clone();
        let xc = propagate_linear(&z, &ua.combine(&ub, s).unwrap(), &p).unwrap().terminal().clone();
        let expect = &xa + &(&xb * s);
        prop_assert!((&xc - &expect).sobolev_norm(3.0) < 1e-9 * (1.0 + expect.sobolev_norm(3.0)));
    }

    #[test]
    fn conjugate_reversal_undoes_the_flow(
        coeffs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4),
        u in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        prop_assume!(coeffs.iter().map(|(a, b)| a * a + b * b).sum::<f64>() > 0.1);
        let p = params(8, 256);
        let psi0 = unit(&coeffs);
        let u = control(&u, 4);
        let forward = propagate_nls(&psi0, &u, &p).unwrap().terminal().conj();
        let back = propagate_nls(&forward, &u.reversed(), &p).unwrap().terminal().conj();
        prop_assert!((&back - &psi0.resized(8)).sobolev_norm(3.0) < 1e-9);
    }
}

fn terminal(integrator: Integrator, steps: usize) -> ModalState {
    let p = params(8, steps).with_integrator(integrator);
    let psi0 = unit(&[(0.8, 0.1), (0.3, -0.4), (0.0, 0.2)]);
    let u = stationary_control(&p).unwrap().rebin(2).unwrap().combine(&control(&[0.5, -1.0, 2.0, 0.3, -0.7, 1.1, 0.2, 0.9], 4), 1.0).unwrap();
    propagate_nls(&psi0, &u, &p).unwrap().terminal().clone()
}

#[test]
fn observed_orders_match_nominal() {
    for (integ, coarse) in [(Integrator::Midpoint, 256), (Integrator::TripleJump, 512), (Integrator::Suzuki, 512)] {
        let a = terminal(integ, coarse);
        let b = terminal(integ, 2 * coarse);
        let c = terminal(integ, 4 * coarse);
        let ratio = (&a - &b).sobolev_norm(3.0) / (&b - &c).sobolev_norm(3.0);
        let expect = 2f64.powi(integ.order() as i32);
        assert!((ratio / expect - 1.0).abs() < 0.15, "{integ:?}: ratio {ratio}, expected {expect}");
    }
}

#[test]
fn integrators_agree_on_a_smooth_problem() {
    let reference = terminal(Integrator::KahanLi, 2048);
    for (integ, tol) in [(Integrator::TripleJump, 1e-6), (Integrator::Suzuki, 1e-7)] {
        let d = (&terminal(integ, 2048) - &reference).sobolev_norm(3.0);
        assert!(d < tol, "{integ:?}: {d}");
    }
}

#[test]
fn duhamel_quadrature_converges_to_the_exact_linear_flow() {
    let raw = ModalState::new(vec![C64::new(0.1, 0.2), C64::new(-0.3, 0.05), C64::new(0.0, -0.1)]).resized(8);
    let v = control(&[1.0, 0.0, -0.5, 0.2], 4);
    let err = |steps: usize| {
        let p = params(8, steps);
        let phi = p.phi();
        let xi0 = &raw - &phi.scale(C64::new(raw.inner_l2(&phi), 0.0));
        let exact = propagate_linear(&xi0, &v, &p).unwrap().terminal().clone();
        (&exact - &duhamel_linear(&xi0, &v, &p).unwrap()).sobolev_norm(3.0) / exact.sobolev_norm(3.0)
    };
    let (coarse, fine) = (err(512), err(1024));
    assert!(fine < 3e-4, "{fine}");
    assert!((coarse / fine - 4.0).abs() < 0.4, "{coarse} {fine}");
}

#[test]
fn stationary_control_fixes_the_ground_state() {
    let p = params(16, 512);
    let u = stationary_control(&p).unwrap();
    let traj = propagate_nls(&p.phi(), &u, &p).unwrap();
    assert!((traj.terminal() - &p.phi()).sobolev_norm(3.0) < 1e-9);
}

