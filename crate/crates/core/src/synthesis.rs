//! Controls for the linearized equation: the single-direction moment problem
//! and the full input–output least-squares solve.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{propagate_linear, ControlSignal, ProblemParams};
use crate::error::{Error, Result};
use crate::linalg::{orthogonal_complement, phi1, sorted_svd};
use crate::spectral::{mu_coefficients, stacked_h3_weights, ModalState, SampledField, SpectralOperator, C64};

/// Random state tangent at the real unit state `phi`, supported on modes
/// `1..=modes` with `k⁻⁴` decaying amplitudes and `H³` norm `h3_norm`.
pub fn random_tangent<R: Rng>(rng: &mut R, phi: &ModalState, modes: usize, h3_norm: f64) -> ModalState {
    let n = phi.truncation();
    let mut xi = ModalState::zeros(n);
    for k in 1..=modes.min(n) {
        let w = (k as f64).powi(-4);
        xi.coeffs_mut()[k - 1] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * w;
    }
    let along = xi.inner_l2(phi) / phi.norm_l2().powi(2);
    let xi = &xi - &(phi * along);
    let norm = xi.sobolev_norm(3.0);
    if norm == 0.0 {
        return xi;
    }
    &xi * (h3_norm / norm)
}

/// Components of a target above the moment range must stay below this.
pub const TAIL_TOL: f64 = 1e-10;
/// Default relative residual accepted by [`solve_linearized_control`].
pub const LINCTRL_TOL: f64 = 1e-6;
const STRUCTURAL_ZERO: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct MomentSpec {
    /// `ω_k = λ_{k,V} − λ`.
    pub frequencies: Vec<f64>,
    pub targets: Vec<C64>,
    pub horizon: f64,
    /// `ℓ²` norm of target components beyond the moment range, when above
    /// [`TAIL_TOL`].
    pub tail_ignored: Option<f64>,
}

impl MomentSpec {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// `ω_k − ω_{k−1}`.
    pub fn gaps(&self) -> Vec<f64> {
        self.frequencies.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// `m_k = i e^{iω_k T} ∫ ξ̃ φ_{k,V} / ⟨μφ, φ_{k,V}⟩` for `k = 1..=count`.
pub fn moments_from_target(
    xi_target: &ModalState,
    op: &SpectralOperator,
    mu: &SampledField,
    horizon: f64,
    count: usize,
) -> Result<MomentSpec> {
    let n = op.truncation();
    if xi_target.truncation() > n {
        return Err(Error::Shape(format!("target truncation {} exceeds N = {n}", xi_target.truncation())));
    }
    if count == 0 {
        return Err(Error::Invalid("at least one moment is needed".into()));
    }
    let k_max = count.min(n);
    let xi = xi_target.resized(n);
    let c = mu_coefficients(mu, op, k_max)?;
    if let Some(k) = c.iter().position(|v| v.abs() < STRUCTURAL_ZERO) {
        return Err(Error::DivisionByStructuralZero { k: k + 1 });
    }
    let lambda = op.ground_energy();
    let pm = op.eigenvector_matrix();
    let project = |k: usize| -> C64 { xi.coeffs().iter().enumerate().map(|(j, z)| z * pm[(j, k - 1)]).sum() };
    let mut frequencies = Vec::with_capacity(k_max);
    let mut targets = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let omega = op.eigenvalue(k) - lambda;
        frequencies.push(omega);
        targets.push(C64::new(0.0, 1.0) * C64::new(0.0, omega * horizon).exp() * project(k) / c[k - 1]);
    }
    let tail = (k_max + 1..=n).map(|k| project(k).norm_sqr()).sum::<f64>().sqrt();
    Ok(MomentSpec { frequencies, targets, horizon, tail_ignored: (tail > TAIL_TOL).then_some(tail) })
}

/// `∫ e^{iωs}` over `[a, a + h]`.
fn bin_moment(omega: f64, a: f64, h: f64) -> C64 {
    C64::new(0.0, omega * a).exp() * phi1(C64::new(0.0, omega * h)) * h
}

#[derive(Clone, Debug)]
pub struct MomentSolution {
    pub control: ControlSignal,
    /// `|∫ e^{iω_k s} v(s) ds − m_k|` per moment.
    pub residuals: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Minimal-norm real piecewise-constant `v` on `m_ctrl` equal bins matching
/// the moments; only the real part of the first equation is imposed.
pub fn solve_moment_problem(spec: &MomentSpec, m_ctrl: usize, ridge: f64) -> Result<MomentSolution> {
    let k = spec.len();
    if k == 0 {
        return Err(Error::Invalid("empty moment specification".into()));
    }
    if m_ctrl < 4 * k {
        return Err(Error::Invalid(format!("need at least {} control bins for {k} moments, got {m_ctrl}", 4 * k)));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Invalid(format!("ridge {ridge} must be nonnegative")));
    }
    let h = spec.horizon / m_ctrl as f64;
    let complex = DMatrix::from_fn(k, m_ctrl, |r, j| bin_moment(spec.frequencies[r], j as f64 * h, h));
    let rows = 2 * k - 1;
    let mut a = DMatrix::zeros(rows, m_ctrl);
    let mut b = DVector::zeros(rows);
    a.row_mut(0).copy_from(&complex.row(0).map(|z| z.re));
    b[0] = spec.targets[0].re;
    for r in 1..k {
        a.row_mut(2 * r - 1).copy_from(&complex.row(r).map(|z| z.re));
        a.row_mut(2 * r).copy_from(&complex.row(r).map(|z| z.im));
        b[2 * r - 1] = spec.targets[r].re;
        b[2 * r] = spec.targets[r].im;
    }
    let svd = sorted_svd(&a);
    let sigma_max = svd.singular_values[0];
    let sigma_min = *svd.singular_values.last().expect("nonempty");
    if sigma_min < 1e-12 * sigma_max {
        return Err(Error::IllPosed { ratio: sigma_min / sigma_max });
    }
    let v = svd.solve(&b, rows, ridge);
    let achieved = complex.map(|z| z) * v.map(|x| C64::new(x, 0.0));
    let residuals = (0..k).map(|r| (achieved[r] - spec.targets[r]).norm()).collect();
    let control = ControlSignal::uniform(spec.horizon, v.iter().map(|&x| vec![x]).collect())?;
    Ok(MomentSolution { control, residuals, sigma_min, sigma_max })
}

/// Residuals `|∫ e^{iω_k s} v(s) ds − m_k|` with the per-interval closed form.
pub fn verify_moments(v: &ControlSignal, spec: &MomentSpec) -> Result<Vec<f64>> {
    if v.channels() != 1 {
        return Err(Error::Shape(format!("moment check needs a scalar control, got {} channels", v.channels())));
    }
    Ok(spec
        .frequencies
        .iter()
        .zip(&spec.targets)
        .map(|(&omega, &m)| {
            let integral: C64 = v
                .times()
                .windows(2)
                .zip(v.values())
                .map(|(w, u)| {
                    let piece = if omega == 0.0 {
                        C64::new(w[1] - w[0], 0.0)
                    } else {
                        (C64::new(0.0, omega * w[1]).exp() - C64::new(0.0, omega * w[0]).exp()) / C64::new(0.0, omega)
                    };
                    piece * u[0]
                })
                .sum();
            (integral - m).norm()
        })
        .collect())
}

/// Least-squares coordinates of `μ` in the span of the control fields.
pub fn field_coordinates(mu: &SampledField, params: &ProblemParams) -> Result<Vec<f64>> {
    let m = params.grid_size();
    if mu.grid_size() != m {
        return Err(Error::Shape(format!("mu grid {} differs from {m}", mu.grid_size())));
    }
    let q = params.channels();
    if q == 0 {
        return Err(Error::SpanDeficient { residual: mu.max_abs(), component: "mu".into() });
    }
    let a = DMatrix::from_fn(m + 1, q, |x, c| params.fields()[c].values()[x]);
    let b = DVector::from_column_slice(mu.values());
    let svd = sorted_svd(&a);
    let x = svd.solve(&b, svd.rank(1e-12), 0.0);
    let residual = (&a * &x - &b).amax() / mu.max_abs().max(1e-300);
    if residual > 1e-10 {
        return Err(Error::SpanDeficient { residual, component: "mu".into() });
    }
    Ok(x.iter().copied().collect())
}

#[derive(Clone, Debug)]
pub struct SingleDirectionResult {
    pub control: ControlSignal,
    pub spec: MomentSpec,
    pub moment_residuals: Vec<f64>,
    /// `‖ξ(T) − ξ̃‖₍₃₎ / ‖ξ̃‖₍₃₎` from `propagate_linear` with `W = 0`
    /// (absolute when the target vanishes).
    pub terminal_error: f64,
}

/// Solves the `W = 0` problem with the scalar control `v(t)μ`, `μ ∈ span Q`,
/// using `moments` moments on `bins` control intervals.
pub fn single_direction_control(
    xi_target: &ModalState,
    params: &ProblemParams,
    mu: &SampledField,
    moments: usize,
    bins: usize,
) -> Result<SingleDirectionResult> {
    let alpha = field_coordinates(mu, params)?;
    let spec = moments_from_target(xi_target, params.operator(), mu, params.horizon, moments)?;
    let sol = solve_moment_problem(&spec, bins, 0.0)?;
    let values = sol.control.values().iter().map(|v| alpha.iter().map(|a| a * v[0]).collect()).collect();
    let control = ControlSignal::new(sol.control.times().to_vec(), values)?;
    let free = params.clone().with_coupling(SampledField::zeros(params.grid_size()))?;
    let n = params.truncation();
    let reached = propagate_linear(&ModalState::zeros(n), &control, &free)?;
    let target = xi_target.resized(n);
    let err = (reached.terminal() - &target).sobolev_norm(3.0);
    let scale = target.sobolev_norm(3.0);
    let terminal_error = if scale > 0.0 { err / scale } else { err };
    Ok(SingleDirectionResult { control, spec, moment_residuals: sol.residuals, terminal_error })
}

/// Conditioning and residual of a discretized control-to-state solve.
#[derive(Clone, Debug, Serialize)]
pub struct GramReport {
    pub rows: usize,
    pub cols: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub residual: f64,
}

impl GramReport {
    pub fn sigma_min(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }
}

impl fmt::Display for GramReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows = {}", self.rows)?;
        writeln!(f, "cols = {}", self.cols)?;
        writeln!(f, "rank = {}", self.rank)?;
        writeln!(f, "sigma_max = {:.6e}", self.sigma_max())?;
        writeln!(f, "sigma_min = {:.6e}", self.sigma_min())?;
        writeln!(f, "residual = {:.6e}", self.residual)?;
        let sv: Vec<String> = self.singular_values.iter().map(|s| format!("{s:.6e}")).collect();
        writeln!(f, "singular_values = {}", sv.join(","))
    }
}

/// Least squares in `H³`-weighted coordinates restricted to the tangent
/// space at a unit state.
pub(crate) struct TangentSolve {
    /// Maps stacked states to reduced weighted tangent coordinates.
    reduce: DMatrix<f64>,
    /// Maps reduced coordinates back to stacked states.
    lift: DMatrix<f64>,
}

impl TangentSolve {
    /// `base` is the point whose tangent space `Re⟨ξ, base⟩ = 0` is used.
    pub(crate) fn new(base: &ModalState) -> Self {
        let n = base.truncation();
        let w = DVector::from_vec(stacked_h3_weights(n));
        let b = DVector::from_vec(base.to_stacked());
        // tangent condition bᵀx = 0 becomes (W⁻¹b)ᵀ y = 0 for y = W x
        let mut normal = b.component_div(&w);
        normal /= normal.norm();
        let basis = orthogonal_complement(&DMatrix::from_column_slice(2 * n, 1, normal.as_slice()), 2 * n);
        let reduce = basis.transpose() * DMatrix::from_diagonal(&w);
        let lift = DMatrix::from_diagonal(&w.map(|x| 1.0 / x)) * &basis;
        Self { reduce, lift }
    }

    /// Minimal-norm `x` with `M x ≈ target`, truncated at `rel_rank`.
    pub(crate) fn solve(
        &self,
        matrix: &DMatrix<f64>,
        target: &ModalState,
        rel_rank: f64,
    ) -> (DVector<f64>, GramReport, DVector<f64>) {
        let a = &self.reduce * matrix;
        let y = &self.reduce * DVector::from_vec(target.to_stacked());
        let svd = sorted_svd(&a);
        let rank = svd.rank(rel_rank);
        let x = svd.solve(&y, rank, 0.0);
        let scale = y.norm();
        let miss = &a * &x - &y;
        let residual = if scale > 0.0 { miss.norm() / scale } else { miss.norm() };
        // least reachable state direction, in stacked L² coordinates
        let k = svd.singular_values.len().min(a.nrows());
        let weakest = if rank < a.nrows() { svd.u.column(rank).into_owned() } else { svd.u.column(k - 1).into_owned() };
        let mut direction = &self.lift * weakest;
        direction /= direction.norm();
        let report = GramReport {
            rows: a.nrows(),
            cols: a.ncols(),
            singular_values: svd.singular_values.clone(),
            rank,
            residual,
        };
        (x, report, direction)
    }
}

/// Input–output matrix of `v ↦ ξ(T)` for piecewise-constant controls on
/// `bins` equal intervals, columns bin-major.
pub fn linear_response_matrix(params: &ProblemParams, bins: usize) -> Result<DMatrix<f64>> {
    if bins == 0 || !params.steps.is_multiple_of(bins) {
        return Err(Error::TimeGridMismatch(format!("{bins} bins do not divide {} steps", params.steps)));
    }
    let n = params.truncation();
    let q = params.channels();
    let columns: Vec<Result<Vec<f64>>> = (0..q * bins)
        .into_par_iter()
        .map(|col| {
            let mut values = vec![vec![0.0; q]; bins];
            values[col / q][col % q] = 1.0;
            let v = ControlSignal::uniform(params.horizon, values)?;
            Ok(propagate_linear(&ModalState::zeros(n), &v, params)?.terminal().to_stacked())
        })
        .collect();
    let mut g = DMatrix::zeros(2 * n, q * bins);
    for (c, col) in columns.into_iter().enumerate() {
        g.set_column(c, &DVector::from_vec(col?));
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct LinearControl {
    pub control: ControlSignal,
    pub report: GramReport,
    /// Unit stacked direction of the smallest retained singular value (or
    /// the first dropped one), the least reachable state direction.
    pub weakest_direction: ModalState,
}

/// Exact control of the linear flow onto a tangent target with `bins`
/// piecewise-constant intervals per channel.
///
/// With `warm_start = Some(μ)` the `W = 0` single-direction control is used
/// as an initial guess and only the correction is solved in least squares.
pub fn solve_linearized_control(
    xi_target: &ModalState,
    params: &ProblemParams,
    bins: usize,
    warm_start: Option<&SampledField>,
    tol: f64,
) -> Result<LinearControl> {
    let n = params.truncation();
    if xi_target.truncation() > n {
        return Err(Error::Shape(format!("target truncation {} exceeds N = {n}", xi_target.truncation())));
    }
    let target = xi_target.resized(n);
    let phi = params.phi();
    let tangency = target.inner_l2(&phi).abs();
    if tangency > 1e-10 * (1.0 + target.norm_l2()) {
        return Err(Error::Invalid(format!("target is not tangent at phi (Re<xi, phi> = {tangency:.3e})")));
    }
    let g = linear_response_matrix(params, bins)?;
    let solver = TangentSolve::new(&phi);
    let (initial, remaining) = match warm_start {
        Some(mu) => {
            let guess = single_direction_control(&target, params, mu, n, bins)?.control;
            let reached = &g * DVector::from_vec(guess.flatten());
            let rest = &target - &ModalState::from_stacked(reached.as_slice());
            (Some(guess), rest)
        }
        None => (None, target.clone()),
    };
    let (x, mut report, direction) = solver.solve(&g, &remaining, 1e-13);
    if let Some(guess) = &initial {
        let reached = &g * (DVector::from_vec(guess.flatten()) + &x);
        let miss = &target - &ModalState::from_stacked(reached.as_slice());
        let scale = target.sobolev_norm(3.0);
        report.residual = if scale > 0.0 { miss.sobolev_norm(3.0) / scale } else { miss.sobolev_norm(3.0) };
    }
    let weakest_direction = ModalState::from_stacked(direction.as_slice());
    if report.residual > tol {
        return Err(Error::ControlDeficient { residual: report.residual, direction: direction.iter().copied().collect() });
    }
    let q = params.channels();
    let mut flat: Vec<f64> = x.iter().copied().collect();
    if let Some(guess) = &initial {
        for (a, b) in flat.iter_mut().zip(guess.flatten()) {
            *a += b;
        }
    }
    let values = flat.chunks(q).map(|c| c.to_vec()).collect();
    let control = ControlSignal::uniform(params.horizon, values)?;
    Ok(LinearControl { control, report, weakest_direction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Builtin;
    use crate::spectral::{build_operator, GRID_FACTOR};
    use std::f64::consts::PI;

    #[test]
    fn zero_target_zero_moments() {
        let n = 16;
        let op = build_operator(&SampledField::zeros(GRID_FACTOR * n), n).unwrap();
        let mu = Builtin::XSq.sample(GRID_FACTOR * n);
        let spec = moments_from_target(&ModalState::zeros(n), &op, &mu, 1.0, 8).unwrap();
        assert!(spec.targets.iter().all(|m| m.norm() == 0.0));
        let sol = solve_moment_problem(&spec, 64, 0.0).unwrap();
        assert!(sol.control.values().iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn second_mode_target_has_single_moment() {
        let n = 16;
        let op = build_operator(&SampledField::zeros(GRID_FACTOR * n), n).unwrap();
        let mu = Builtin::XSq.sample(GRID_FACTOR * n);
        let eps = 1e-3;
        let target = &ModalState::basis(2, n) * eps;
        let spec = moments_from_target(&target, &op, &mu, 1.0, 8).unwrap();
        let want = eps * 9.0 * PI * PI / 16.0;
        assert!((spec.targets[1].norm() - want).abs() < 1e-6 * want);
        for (k, m) in spec.targets.iter().enumerate() {
            if k != 1 {
                assert!(m.norm() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_field_hits_structural_zero() {
        let n = 16;
        let op = build_operator(&SampledField::zeros(GRID_FACTOR * n), n).unwrap();
        let mu = Builtin::X.sample(GRID_FACTOR * n);
        match moments_from_target(&ModalState::basis(2, n), &op, &mu, 1.0, 8) {
            Err(Error::DivisionByStructuralZero { k }) => assert_eq!(k, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dc_moment_gives_constant_control() {
        let spec = MomentSpec { frequencies: vec![0.0], targets: vec![C64::new(0.7, 0.0)], horizon: 2.0, tail_ignored: None };
        let sol = solve_moment_problem(&spec, 8, 0.0).unwrap();
        for v in sol.control.values() {
            assert!((v[0] - 0.35).abs() < 1e-14);
        }
    }

    #[test]
    fn verify_moments_zero_control() {
        let spec = MomentSpec {
            frequencies: vec![0.0, 3.0],
            targets: vec![C64::new(0.5, 0.0), C64::new(0.1, -0.2)],
            horizon: 1.0,
            tail_ignored: None,
        };
        let v = ControlSignal::zeros(1.0, 1, 4).unwrap();
        let r = verify_moments(&v, &spec).unwrap();
        assert_eq!(r[0], 0.5);
        assert!((r[1] - spec.targets[1].norm()).abs() < 1e-15);
    }

    #[test]
    fn gram_report_serializes_as_key_values() {
        let r = GramReport { rows: 2, cols: 3, singular_values: vec![2.0, 1.0], rank: 2, residual: 0.0 };
        let text = r.to_string();
        assert!(text.contains("rows = 2"));
        assert!(text.contains("sigma_min = 1.000000e0"));
    }
}
