//! Newton steering of the nonlinear equation between `H³`-neighbours of the
//! ground state, the two-leg time-reversal variant, and the derivative check.

use rand::Rng;
use serde::Serialize;

use crate::dynamics::{
    control_jacobian, linearize, propagate_nls, stationary_control, ControlSignal, ProblemParams, Trajectory,
};
use crate::error::{Error, Result};
use crate::spectral::{ModalState, C64};
use crate::synthesis::{random_tangent, TangentSolve, LINCTRL_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SteerVerdict {
    Converged,
    Stalled,
    Diverged,
}

impl SteerVerdict {
    pub fn label(self) -> &'static str {
        match self {
            SteerVerdict::Converged => "CONVERGED",
            SteerVerdict::Stalled => "STALLED",
            SteerVerdict::Diverged => "DIVERGED",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SteerOptions {
    /// Target `‖ψ(T) − ψ₁‖₍₃₎`.
    pub tol: f64,
    pub max_iter: usize,
    /// Piecewise-constant intervals of the control; must divide `steps`.
    pub bins: usize,
    /// Radius around `φ` inside which convergence is expected.
    pub delta: f64,
    /// Step halvings tried before declaring divergence.
    pub max_halvings: usize,
}

impl Default for SteerOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 8, bins: 128, delta: 1e-2, max_halvings: 4 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SteeringReport {
    /// Accepted Newton updates.
    pub iterations: usize,
    /// `‖ψ(T) − ψ₁‖₍₃₎` for `u⁰, u¹, …`.
    pub residual_history: Vec<f64>,
    /// `‖uⁿ‖_{L²(0,T)}`.
    pub control_norm_history: Vec<f64>,
    /// `|‖ψ(T)‖ − 1|` per iterate.
    pub norm_drift_history: Vec<f64>,
    /// `r_{n+1} / r_n²`.
    pub contraction: Vec<f64>,
    /// Step length accepted at each update.
    pub step_lengths: Vec<f64>,
    pub verdict: SteerVerdict,
    pub final_control: ControlSignal,
    pub warnings: Vec<String>,
}

impl SteeringReport {
    pub fn residual(&self) -> f64 {
        *self.residual_history.last().expect("at least the initial residual")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// Random unit state with `‖ψ − φ‖₍₃₎ ≤ radius`, obtained by normalizing
/// `φ + ξ` for a random tangent `ξ` on all modes.
pub fn random_near_ground<R: Rng>(rng: &mut R, phi: &ModalState, radius: f64) -> ModalState {
    let n = phi.truncation();
    let xi = random_tangent(rng, phi, n, 1.0);
    let mut scale = 0.99 * radius;
    loop {
        let s = phi + &(&xi * scale);
        let s = s.scale(C64::new(1.0 / s.norm_l2(), 0.0));
        if (&s - phi).sobolev_norm(3.0) <= radius || scale == 0.0 {
            return s;
        }
        scale *= 0.9;
    }
}

fn check_unit(state: &ModalState, name: &str) -> Result<()> {
    let norm = state.norm_l2();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::Invalid(format!("{name} has L2 norm {norm:.12}, expected 1")));
    }
    Ok(())
}

/// `‖ψ(T) − ψ₁‖₍₃₎` for `u`, or `None` when the flow leaves the ceiling.
fn shoot(psi0: &ModalState, psi1: &ModalState, u: &ControlSignal, params: &ProblemParams) -> Result<Option<(f64, f64, Trajectory)>> {
    match propagate_nls(psi0, u, params) {
        Ok(traj) => {
            let r = (traj.terminal() - psi1).sobolev_norm(3.0);
            let drift = (traj.terminal().norm_l2() - 1.0).abs();
            Ok(Some((r, drift, traj)))
        }
        Err(Error::LocalExistenceExceeded { .. }) | Err(Error::NoConvergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Newton iteration on `u ↦ Ψ_T(ψ₀, u)` started from the stationary control,
/// with exact re-linearization at every iterate.
pub fn newton_steer(
    psi0: &ModalState,
    psi1: &ModalState,
    params: &ProblemParams,
    opts: &SteerOptions,
) -> Result<SteeringReport> {
    check_unit(psi0, "psi0")?;
    check_unit(psi1, "psi1")?;
    let n = params.truncation();
    if psi0.truncation() > n || psi1.truncation() > n {
        return Err(Error::Shape(format!("states must have at most N = {n} modes")));
    }
    let (psi0, psi1) = (psi0.resized(n), psi1.resized(n));
    let phi = params.phi();
    let mut warnings = Vec::new();
    for (name, s) in [("psi0", &psi0), ("psi1", &psi1)] {
        let d = (s - &phi).sobolev_norm(3.0);
        if d > opts.delta {
            warnings.push(format!("{name} is {d:.3e} from phi in H3, outside delta = {:.1e}", opts.delta));
        }
    }
    if let Some(w) = params.coupling_warning() {
        warnings.push(w);
    }
    let mut u = stationary_control(params)?.rebin(opts.bins)?;
    let Some((mut r, drift, mut traj)) = shoot(&psi0, &psi1, &u, params)? else {
        return Err(Error::Invalid("stationary control leaves the local existence ceiling".into()));
    };
    let mut report = SteeringReport {
        iterations: 0,
        residual_history: vec![r],
        control_norm_history: vec![u.l2_norm()],
        norm_drift_history: vec![drift],
        contraction: Vec::new(),
        step_lengths: Vec::new(),
        verdict: SteerVerdict::Stalled,
        final_control: u.clone(),
        warnings,
    };
    let mut slow = 0;
    loop {
        if r < opts.tol {
            report.verdict = SteerVerdict::Converged;
            break;
        }
        if report.iterations >= opts.max_iter {
            report.verdict = SteerVerdict::Stalled;
            break;
        }
        let jac = control_jacobian(&traj, params, opts.bins)?;
        let miss = &psi1 - traj.terminal();
        let (dx, gram, direction) = TangentSolve::new(traj.terminal()).solve(&jac, &miss, 1e-10);
        if gram.residual > LINCTRL_TOL {
            return Err(Error::ControlDeficient { residual: gram.residual, direction: direction.iter().copied().collect() });
        }
        let step = ControlSignal::uniform(params.horizon, dx.as_slice().chunks(params.channels()).map(|c| c.to_vec()).collect())?;
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=opts.max_halvings {
            let trial = u.combine(&step, alpha)?;
            let sh = shoot(&psi0, &psi1, &trial, params)?;
            if let Some((rt, dt, tt)) = sh {
                if rt < r {
                    accepted = Some((trial, rt, dt, tt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, rt, dt, tt)) = accepted else {
            report.verdict = SteerVerdict::Diverged;
            break;
        };
        report.contraction.push(rt / (r * r));
        report.step_lengths.push(alpha);
        slow = if rt > 0.9 * r { slow + 1 } else { 0 };
        u = trial;
        r = rt;
        traj = tt;
        report.iterations += 1;
        report.residual_history.push(r);
        report.control_norm_history.push(u.l2_norm());
        report.norm_drift_history.push(dt);
        if slow >= 3 && r >= opts.tol {
            report.verdict = SteerVerdict::Stalled;
            break;
        }
    }
    report.final_control = u;
    Ok(report)
}

/// Residual of `control` from `psi0` to `psi1` on a time grid refined by
/// `factor`.
pub fn refined_residual(
    psi0: &ModalState,
    psi1: &ModalState,
    control: &ControlSignal,
    params: &ProblemParams,
    factor: usize,
) -> Result<f64> {
    let fine = params.clone().with_steps(params.steps * factor);
    let traj = propagate_nls(&psi0.resized(params.truncation()), control, &fine)?;
    Ok((traj.terminal() - &psi1.resized(params.truncation())).sobolev_norm(3.0))
}

#[derive(Clone, Debug, Serialize)]
pub struct TwoLegReport {
    /// Leg `φ → ψ̄₀`; its control reversed in time drives `ψ₀ → φ`.
    pub leg_one: SteeringReport,
    /// Leg `φ → ψ₁`.
    pub leg_two: SteeringReport,
    /// Control on `[0, 2T]`.
    pub control: ControlSignal,
    /// `‖ψ(2T) − ψ₁‖₍₃₎` from a single propagation over `[0, 2T]`.
    pub end_to_end: f64,
    pub verdict: SteerVerdict,
    /// Name of the leg that failed, if any.
    pub failed_leg: Option<String>,
}

/// `ψ₀ → φ → ψ₁` on `[0, 2T]` by time reversal of a steer to `ψ̄₀`.
pub fn two_leg_steer(
    psi0: &ModalState,
    psi1: &ModalState,
    params: &ProblemParams,
    opts: &SteerOptions,
) -> Result<TwoLegReport> {
    let phi = params.phi();
    let leg_one = newton_steer(&phi, &psi0.conj(), params, opts)?;
    let leg_two = newton_steer(&phi, psi1, params, opts)?;
    let control = leg_one.final_control.reversed().concat(&leg_two.final_control)?;
    let failed_leg = if leg_one.verdict != SteerVerdict::Converged {
        Some("leg one (psi0 -> phi)".to_string())
    } else if leg_two.verdict != SteerVerdict::Converged {
        Some("leg two (phi -> psi1)".to_string())
    } else {
        None
    };
    let full = params.clone().with_horizon(2.0 * params.horizon).with_steps(2 * params.steps);
    let n = params.truncation();
    let end_to_end = match propagate_nls(&psi0.resized(n), &control, &full) {
        Ok(t) => (t.terminal() - &psi1.resized(n)).sobolev_norm(3.0),
        Err(Error::LocalExistenceExceeded { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let verdict = match &failed_leg {
        Some(_) => {
            if leg_one.verdict == SteerVerdict::Diverged || leg_two.verdict == SteerVerdict::Diverged {
                SteerVerdict::Diverged
            } else {
                SteerVerdict::Stalled
            }
        }
        None if end_to_end < 10.0 * opts.tol => SteerVerdict::Converged,
        None => SteerVerdict::Stalled,
    };
    Ok(TwoLegReport { leg_one, leg_two, control, end_to_end, verdict, failed_leg })
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientCheck {
    pub eps: Vec<f64>,
    /// `‖Ψ_T(ψ₀, û + εv) − Ψ_T(ψ₀, û) − εξ(T)‖₍₃₎`.
    pub remainders: Vec<f64>,
    /// Least-squares slope of `log r` against `log ε`; `None` when exact.
    pub slope: Option<f64>,
    /// All remainders at roundoff level.
    pub exact: bool,
}

/// Finite-difference order of the derivative `v ↦ ξ(T)` at `(ψ₀, û)`.
///
/// A ladder point that leaves the local existence ceiling is replaced by a
/// ten times smaller one.
pub fn gradient_check(
    psi0: &ModalState,
    u_hat: &ControlSignal,
    v: &ControlSignal,
    eps_ladder: &[f64],
    params: &ProblemParams,
) -> Result<GradientCheck> {
    if eps_ladder.is_empty() || eps_ladder.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::Invalid("eps ladder must be nonempty and positive".into()));
    }
    let base = propagate_nls(psi0, u_hat, params)?;
    let xi = linearize(&base, v, params)?;
    let mut eps = Vec::with_capacity(eps_ladder.len());
    let mut remainders = Vec::with_capacity(eps_ladder.len());
    for &e0 in eps_ladder {
        let mut e = e0;
        let pert = loop {
            match propagate_nls(psi0, &u_hat.combine(v, e)?, params) {
                Ok(t) => break t,
                Err(Error::LocalExistenceExceeded { .. }) if e > 1e-12 => e *= 0.1,
                Err(err) => return Err(err),
            }
        };
        let r = (&(pert.terminal() - base.terminal()) - &(&xi * e)).sobolev_norm(3.0);
        eps.push(e);
        remainders.push(r);
    }
    let floor = 1e-12 * (1.0 + base.terminal().sobolev_norm(3.0));
    let exact = remainders.iter().all(|&r| r <= floor);
    let slope = if exact || eps.len() < 2 {
        None
    } else {
        let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
        let ys: Vec<f64> = remainders.iter().map(|r| r.max(f64::MIN_POSITIVE).ln()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        Some(sxy / sxx)
    };
    Ok(GradientCheck { eps, remainders, slope, exact })
}
