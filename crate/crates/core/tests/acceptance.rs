//! Desk-scale acceptance run: ten criteria, one PASS/FAIL line each.
//!
//! Oracles here are computed independently of the library paths they check
//! (fine trapezoid quadrature, closed forms, re-propagation).

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nlsctrl::dynamics::{propagate_linear, propagate_nls, stationary_control, ControlSignal, ProblemParams, Trajectory};
use nlsctrl::fields::Builtin;
use nlsctrl::saturation::{apply_generator, build_ladder, build_ladder_from, kappa_operator, kappa_sweep, saturation_verdict};
use nlsctrl::spectral::{build_operator, check_asymptotics, verify_mu_bound, ModalState, SampledField, C64};
use nlsctrl::steering::{gradient_check, newton_steer, random_near_ground, two_leg_steer, SteerOptions, SteerVerdict};
use nlsctrl::synthesis::{random_tangent, single_direction_control, solve_linearized_control, solve_moment_problem, verify_moments};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 16;

/// Composite trapezoid rule on `[0, 1]` with `m` panels.
fn trapz(m: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = 1.0 / m as f64;
    let inner: f64 = (1..m).map(|j| f(j as f64 * h)).sum();
    h * (inner + 0.5 * (f(0.0) + f(1.0)))
}

fn sine(k: usize, x: f64) -> f64 {
    2f64.sqrt() * (k as f64 * PI * x).sin()
}

/// Drift accumulated over every flow computed in the run.
#[derive(Default)]
struct Drift {
    norm: f64,
    tangent: f64,
}

impl Drift {
    fn nonlinear(&mut self, traj: &Trajectory) {
        for s in &traj.snapshots {
            self.norm = self.norm.max((s.norm_l2() - 1.0).abs());
        }
    }

    fn linear(&mut self, traj: &Trajectory, phi: &ModalState) {
        for s in &traj.snapshots {
            self.tangent = self.tangent.max(s.inner_l2(phi).abs());
        }
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(t: Instant, limit: Duration) -> bool {
    t.elapsed() < limit
}

fn spectral_exactness() -> Outcome {
    let t = Instant::now();
    let m = 4 * N;
    let op = build_operator(&SampledField::zeros(m), N).unwrap();
    let mut worst: f64 = 0.0;
    for k in 1..=8 {
        let want = (k as f64 * PI).powi(2);
        worst = worst.max((op.eigenvalue(k) - want).abs() / want);
    }
    let v = SampledField::from_fn(m, |x| 3.0 * x * (1.0 - x) + (5.0 * x).sin());
    let base = build_operator(&v, N).unwrap();
    let shifted = build_operator(&v.map(|y| y + 17.25), N).unwrap();
    let shift_err = (1..=N)
        .map(|k| (shifted.eigenvalue(k) - base.eigenvalue(k) - 17.25).abs() / (1.0 + shifted.eigenvalue(k).abs()))
        .fold(0.0, f64::max);
    let pass = worst < 1e-10 && shift_err < 1e-12 && within(t, Duration::from_secs(1));
    outcome(pass, format!("max rel eigen error {worst:.2e}, shift defect {shift_err:.2e}, {:?}", t.elapsed()))
}

fn asymptotics() -> Outcome {
    let t = Instant::now();
    let report = |n: usize| check_asymptotics(&build_operator(&Builtin::Phi1Sq.sample(4 * n), n).unwrap());
    let coarse = report(64);
    let fine = report(128);
    let r = &coarse.residuals;
    let monotone = (4..32).all(|k| r[k].abs() < r[k - 1].abs());
    let sum = |rep: &nlsctrl::spectral::AsymptoticsReport| rep.partial_sums[31];
    let stable = (sum(&coarse) - sum(&fine)).abs();
    let mean_ok = (trapz(4096, |x| 2.0 * (PI * x).sin().powi(2)) - 1.0).abs() < 1e-12;
    let pass = monotone && stable < 1e-6 && sum(&coarse).is_finite() && mean_ok && within(t, Duration::from_secs(5));
    outcome(pass, format!("|r_k| decreasing on 4..=32: {monotone}, sum r_k^2 = {:.6e}, N->2N change {stable:.2e}, {:?}", sum(&coarse), t.elapsed()))
}

fn mu_bound() -> Outcome {
    let t = Instant::now();
    let m = 4 * N;
    let op = build_operator(&SampledField::zeros(m), N).unwrap();
    let sq = verify_mu_bound(&Builtin::XSq.sample(m), &op, 8, 1e-12).unwrap();
    let oracle = trapz(1 << 14, |x| x * x * sine(1, x) * sine(1, x));
    let closed = 1.0 / 3.0 - 1.0 / (2.0 * PI * PI);
    let lin = verify_mu_bound(&Builtin::X.sample(m), &op, 8, 1e-12).unwrap();
    let odd_zeros = lin.rows.iter().filter(|r| r.k % 2 == 1 && r.k >= 3).all(|r| r.coefficient.abs() < 1e-12);
    let pass = sq.argmin == 1
        && (sq.c_est - oracle).abs() < 1e-3
        && (oracle - closed).abs() < 1e-6
        && sq.verdict.is_pass()
        && !lin.verdict.is_pass()
        && odd_zeros
        && within(t, Duration::from_secs(1));
    outcome(pass, format!("c_est(x^2) = {:.6} (oracle {oracle:.6}), x: {} with odd zeros {odd_zeros}, {:?}", sq.c_est, lin.verdict, t.elapsed()))
}

fn ladder() -> Outcome {
    let t = Instant::now();
    let p = ProblemParams::standard(0.5, N).unwrap();
    let mut init = nalgebra::DMatrix::zeros(2 * N, 2);
    init[(0, 0)] = 1.0;
    init[(1, 1)] = 1.0;
    let lad = build_ladder_from(&init, &p, N, 1e-8);
    let v = saturation_verdict(&lad, &p, 1e-8);
    let levels_used = lad.ranks.iter().position(|&r| r >= 2 * N).unwrap_or(usize::MAX);

    // generator on φ_m with V = 0 and W = 2κφ₁²: i(c_m + 2κ)φ_m − iκ(φ_{m−2} + φ_{m+2})
    let kappa = 0.5;
    let mut coeff_err: f64 = 0.0;
    for half in 2..=7 {
        let mm = 2 * half - 1;
        let g = apply_generator(&ModalState::basis(mm, N), &p).unwrap();
        let c = PI * PI * ((mm * mm) as f64 - 1.0);
        let expect = |k: usize| -> f64 {
            if k == mm {
                c + 2.0 * kappa
            } else if k + 2 == mm || k == mm + 2 {
                -kappa
            } else {
                0.0
            }
        };
        for k in 1..=N {
            let z = g.coeff(k);
            coeff_err = coeff_err.max(z.re.abs()).max((z.im - expect(k)).abs() / (1.0 + c));
        }
    }
    // φ₁²φ₃ = ½(2φ₃ − φ₁ − φ₅), coefficient by coefficient
    let identity_err = (1..=7)
        .map(|k| {
            let lhs = trapz(1 << 12, |x| sine(1, x).powi(2) * sine(3, x) * sine(k, x));
            let rhs = match k {
                3 => 1.0,
                1 | 5 => -0.5,
                _ => 0.0,
            };
            (lhs - rhs).abs()
        })
        .fold(0.0, f64::max);
    let pass = v.saturating && v.tangent_rank == 2 * N - 1 && levels_used <= N && coeff_err < 1e-9 && identity_err < 1e-9 && within(t, Duration::from_secs(5));
    outcome(pass, format!("ranks {:?}, tangent rank {}, coefficient error {coeff_err:.2e}, identity error {identity_err:.2e}, {:?}", lad.ranks, v.tangent_rank, t.elapsed()))
}

fn sweep() -> Outcome {
    let t = Instant::now();
    let sw = kappa_sweep(3, -30.0, 0.0, 301, N).unwrap();
    let k1 = sw.crossings.iter().find(|c| c.k == 1).map(|c| c.kappa_star.abs()).unwrap_or(f64::INFINITY);
    let h = 1e-4;
    let fd = (kappa_operator(h, N).unwrap().eigenvalue(1) - kappa_operator(-h, N).unwrap().eigenvalue(1)) / (2.0 * h);
    let oracle = 8.0 * trapz(1 << 12, |x| (PI * x).sin().powi(4));
    let pass = sw.strictly_increasing
        && sw.max_hf_error() < 1e-5
        && k1 < 1e-8
        && (fd - 3.0).abs() < 1e-6
        && (oracle - 3.0).abs() < 1e-12
        && within(t, Duration::from_secs(10));
    outcome(pass, format!("crossings {:?}, max HF error {:.2e}, dlambda1/dkappa(0) = {fd:.9}, {:?}", sw.crossings.iter().map(|c| (c.k, c.kappa_star)).collect::<Vec<_>>(), sw.max_hf_error(), t.elapsed()))
}

fn moments(rng: &mut ChaCha8Rng, drift: &mut Drift) -> Outcome {
    let t = Instant::now();
    let p = ProblemParams::standard(0.5, N).unwrap();
    let free = p.clone().with_coupling(SampledField::zeros(p.grid_size())).unwrap();
    let mu = Builtin::XSq.sample(p.grid_size());
    let phi = p.phi();
    let mut worst_moment: f64 = 0.0;
    let mut worst_terminal: f64 = 0.0;
    for _ in 0..8 {
        let target = random_tangent(rng, &phi, 8, 1e-3);
        let res = single_direction_control(&target, &p, &mu, N, 64).unwrap();
        let sol = solve_moment_problem(&res.spec, 64, 0.0).unwrap();
        worst_moment = worst_moment.max(verify_moments(&sol.control, &res.spec).unwrap().into_iter().fold(0.0, f64::max));
        let traj = propagate_linear(&ModalState::zeros(N), &res.control, &free).unwrap();
        drift.linear(&traj, &phi);
        let err = (traj.terminal() - &target).sobolev_norm(3.0) / target.sobolev_norm(3.0);
        worst_terminal = worst_terminal.max(err);
    }
    let pass = worst_moment < 1e-8 && worst_terminal < 1e-6 && within(t, Duration::from_secs(10));
    outcome(pass, format!("max moment residual {worst_moment:.2e}, max relative H3 error {worst_terminal:.2e}, {:?}", t.elapsed()))
}

fn angle(a: &ModalState, b: &ModalState) -> f64 {
    (a.inner_l2(b).abs() / (a.norm_l2() * b.norm_l2())).min(1.0).acos()
}

fn linear_control(rng: &mut ChaCha8Rng, drift: &mut Drift) -> Outcome {
    let t = Instant::now();
    let p = ProblemParams::standard(0.5, N).unwrap();
    let phi = p.phi();
    let target = random_tangent(rng, &phi, N, 1e-3);
    let sol = solve_linearized_control(&target, &p, 64, None, 1e-6).unwrap();
    let traj = propagate_linear(&ModalState::zeros(N), &sol.control, &p).unwrap();
    drift.linear(&traj, &phi);
    let rel = (traj.terminal() - &target).sobolev_norm(3.0) / target.sobolev_norm(3.0);

    let sw = kappa_sweep(2, -30.0, -1.0, 59, N).unwrap();
    let star = sw.crossings.iter().find(|c| c.k == 2).expect("second track crosses zero");
    let ps = ProblemParams::standard(star.kappa_star, N).unwrap();
    let v = saturation_verdict(&build_ladder(&ps, 4 * N, 1e-8), &ps, 1e-8);
    let expected = kappa_operator(star.kappa_star, N).unwrap().eigenvector(2).scale(C64::new(0.0, 1.0));
    let theta = v.missed.as_ref().map(|d| angle(d, &expected)).unwrap_or(f64::INFINITY);
    let pass = rel < 1e-6 && v.codim == 1 && theta < 1e-3 && within(t, Duration::from_secs(60));
    outcome(pass, format!("relative terminal residual {rel:.2e}; kappa* = {:.12}, codim {}, angle {theta:.2e} rad, {:?}", star.kappa_star, v.codim, t.elapsed()))
}

fn gradient(rng: &mut ChaCha8Rng, drift: &mut Drift) -> Outcome {
    let t = Instant::now();
    let p = ProblemParams::standard(1.0, N).unwrap();
    let u = stationary_control(&p).unwrap().rebin(16).unwrap();
    let v = ControlSignal::uniform(1.0, (0..16).map(|_| (0..4).map(|_| 10.0 * rng.gen_range(-1.0..1.0)).collect()).collect()).unwrap();
    let psi0 = random_near_ground(rng, &p.phi(), 1e-3);
    let g = gradient_check(&psi0, &u, &v, &[1e-2, 1e-3, 1e-4, 1e-5], &p).unwrap();
    drift.nonlinear(&propagate_nls(&psi0, &u.combine(&v, 1e-2).unwrap(), &p).unwrap());
    let slope = g.slope.unwrap_or(f64::NAN);
    let pass = (slope - 2.0).abs() <= 0.1 && g.eps.len() == 4 && g.eps[3] == 1e-5 && within(t, Duration::from_secs(30));
    outcome(pass, format!("slope {slope:.4}, remainders {:?}, {:?}", g.remainders.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>(), t.elapsed()))
}

fn steering(rng: &mut ChaCha8Rng, drift: &mut Drift) -> Outcome {
    let t = Instant::now();
    let p = ProblemParams::standard(0.5, N).unwrap();
    let phi = p.phi();
    let psi0 = random_near_ground(rng, &phi, 1e-3);
    let psi1 = random_near_ground(rng, &phi, 1e-3);
    let close = [&psi0, &psi1].iter().all(|s| (*s - &phi).sobolev_norm(3.0) <= 1e-3 && (s.norm_l2() - 1.0).abs() < 1e-14);
    let opts = SteerOptions::default();
    let rep = newton_steer(&psi0, &psi1, &p, &opts).unwrap();
    let coarse = propagate_nls(&psi0, &rep.final_control, &p).unwrap();
    drift.nonlinear(&coarse);
    let residual = (coarse.terminal() - &psi1).sobolev_norm(3.0);
    let fine = propagate_nls(&psi0, &rep.final_control, &p.clone().with_steps(2 * p.steps)).unwrap();
    drift.nonlinear(&fine);
    let refined = (fine.terminal() - &psi1).sobolev_norm(3.0);
    let two = two_leg_steer(&psi0, &psi1, &p, &opts).unwrap();
    let pass = close
        && rep.verdict == SteerVerdict::Converged
        && residual < 1e-8
        && rep.iterations <= 6
        && refined <= 10.0 * residual
        && two.verdict == SteerVerdict::Converged
        && within(t, Duration::from_secs(300));
    outcome(
        pass,
        format!(
            "{} in {} iterations, residual {residual:.2e}, 2x re-propagation {refined:.2e}; two-leg {} end-to-end {:.2e}, {:?}",
            rep.verdict.label(),
            rep.iterations,
            two.verdict.label(),
            two.end_to_end,
            t.elapsed()
        ),
    )
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut drift = Drift::default();
    let mut results = vec![
        ("1 spectral exactness", spectral_exactness()),
        ("2 eigenvalue asymptotics", asymptotics()),
        ("3 mu lower bound", mu_bound()),
        ("4 saturation ladder", ladder()),
        ("5 kappa sweep", sweep()),
        ("6 moment problem", moments(&mut rng, &mut drift)),
        ("7 linearized exact control", linear_control(&mut rng, &mut drift)),
        ("8 gradient contract", gradient(&mut rng, &mut drift)),
        ("9 desk-scale steering", steering(&mut rng, &mut drift)),
    ];
    let pass = drift.norm < 1e-10 && drift.tangent < 1e-10;
    results.push(("10 unitarity and tangency", outcome(pass, format!("max L2 norm drift {:.2e}, max tangent drift {:.2e}", drift.norm, drift.tangent))));
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
