//! Saturation spaces, rank tests, and the κ-sweep of `A_κ = −∂² − π² + 2κφ₁²`.
//!
//! Subspaces are stored as orthonormal columns in the stacked `(Re, Im)`
//! coefficient representation of dimension `2N`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::ProblemParams;
use crate::error::{Error, Result};
use crate::fields::Builtin;
use crate::linalg::{orthogonal_complement, sorted_svd};
use crate::spectral::{build_operator, laplacian_eigenvalue, ModalState, SampledField, SpectralOperator, GRID_FACTOR};

/// Consecutive levels of equal rank needed to call the ladder stable.
pub const STABLE_LEVELS: usize = 3;

const ROUNDOFF_CHOP: f64 = 1e-12;

/// Stacked matrix of `g ↦ i(A_V g − λg + W·Re g)`.
pub fn generator_matrix(params: &ProblemParams) -> DMatrix<f64> {
    let n = params.truncation();
    let op = params.operator();
    let mut k = op.galerkin_matrix().clone();
    for j in 0..n {
        k[(j, j)] -= params.lambda();
    }
    let wg = op.grid().multiplication_matrix(params.coupling().values());
    let mut f = DMatrix::zeros(2 * n, 2 * n);
    f.view_mut((0, n), (n, n)).copy_from(&(-&k));
    f.view_mut((n, 0), (n, n)).copy_from(&(k + wg));
    // quadrature leaves roundoff-sized entries that break exact symmetries
    let floor = ROUNDOFF_CHOP * f.amax();
    f.iter_mut().filter(|v| v.abs() < floor).for_each(|v| *v = 0.0);
    f
}

/// `i(A_V g − λg + W·Re g)`.
pub fn apply_generator(g: &ModalState, params: &ProblemParams) -> Result<ModalState> {
    let n = params.truncation();
    if g.truncation() > n {
        return Err(Error::Shape(format!("state truncation {} exceeds N = {n}", g.truncation())));
    }
    let x = DVector::from_vec(g.resized(n).to_stacked());
    Ok(ModalState::from_stacked((generator_matrix(params) * x).as_slice()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LadderStatus {
    Stabilized,
    Partial,
}

#[derive(Clone, Debug)]
pub struct SaturationLadder {
    /// Orthonormal stacked bases of `ℋ₀ ⊂ ℋ₁ ⊂ …`.
    pub levels: Vec<DMatrix<f64>>,
    pub ranks: Vec<usize>,
    pub status: LadderStatus,
}

impl SaturationLadder {
    pub fn last(&self) -> &DMatrix<f64> {
        self.levels.last().expect("ladder has a level")
    }

    /// `max_j ‖(I − P_j) B_{j−1}‖`, the worst inclusion defect between levels.
    pub fn inclusion_defect(&self) -> f64 {
        self.levels
            .windows(2)
            .map(|w| {
                let (prev, next) = (&w[0], &w[1]);
                if prev.ncols() == 0 {
                    return 0.0;
                }
                (prev - next * (next.transpose() * prev)).amax()
            })
            .fold(0.0, f64::max)
    }
}

fn orthonormalize(columns: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    // one global scale: per-column normalization would promote roundoff-sized
    // columns to unit vectors
    let top = columns.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if columns.ncols() == 0 || top == 0.0 {
        return DMatrix::zeros(columns.nrows(), 0);
    }
    let svd = sorted_svd(&(columns / top));
    let rank = svd.rank(tol);
    let mut basis = svd.range(rank);
    // The generator amplifies high-mode roundoff level after level; entries of
    // an orthonormal basis this small carry no rank information at `tol`.
    basis.iter_mut().filter(|v| v.abs() < ROUNDOFF_CHOP).for_each(|v| *v = 0.0);
    basis
}

/// Stacked columns `G(Q_c)φ`: the real span of `{Q_c φ}`.
pub fn initial_space(params: &ProblemParams) -> DMatrix<f64> {
    let n = params.truncation();
    let s = params.source_matrix();
    let mut out = DMatrix::zeros(2 * n, s.ncols());
    out.view_mut((0, 0), (n, s.ncols())).copy_from(&s);
    out
}

/// Ladder starting from `ℋ₀ = span_ℝ{Q_c φ}`.
pub fn build_ladder(params: &ProblemParams, j_max: usize, tol: f64) -> SaturationLadder {
    build_ladder_from(&initial_space(params), params, j_max, tol)
}

/// `[basis | images]` re-orthonormalized, with the images scaled to unit
/// largest column.
fn extend(basis: &DMatrix<f64>, mut images: DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let scale = images.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if scale > 0.0 {
        images /= scale;
    }
    let dim = basis.nrows();
    let mut joint = DMatrix::zeros(dim, basis.ncols() + images.ncols());
    joint.view_mut((0, 0), (dim, basis.ncols())).copy_from(basis);
    joint.view_mut((0, basis.ncols()), (dim, images.ncols())).copy_from(&images);
    orthonormalize(&joint, tol)
}

fn block_diag(re: &DMatrix<f64>, im: &DMatrix<f64>) -> DMatrix<f64> {
    let n = re.nrows();
    let mut out = DMatrix::zeros(2 * n, re.ncols() + im.ncols());
    out.view_mut((0, 0), (n, re.ncols())).copy_from(re);
    out.view_mut((n, re.ncols()), (n, im.ncols())).copy_from(im);
    out
}

/// Ladder from an arbitrary stacked spanning set.
///
/// When the spanning set is purely real (or purely imaginary) every level
/// splits as `R_j ⊕ iI_j` with `R_j = R_{j−1} + K I_{j−1}` and
/// `I_j = I_{j−1} + (K + W) R_{j−1}`, `K = A_V − λ`. The two halves are then
/// tracked separately, which keeps roundoff from leaking across them.
pub fn build_ladder_from(initial: &DMatrix<f64>, params: &ProblemParams, j_max: usize, tol: f64) -> SaturationLadder {
    let n = params.truncation();
    let dim = 2 * n;
    let re0 = initial.rows(0, n).into_owned();
    let im0 = initial.rows(n, n).into_owned();
    let split = re0.amax() == 0.0 || im0.amax() == 0.0;
    let stable = |ranks: &[usize]| {
        ranks.last() == Some(&dim)
            || (ranks.len() >= STABLE_LEVELS && ranks[ranks.len() - STABLE_LEVELS..].windows(2).all(|w| w[0] == w[1]))
    };
    let mut levels = Vec::new();
    let mut ranks = Vec::new();
    if split {
        let f = generator_matrix(params);
        let neg_k = f.view((0, n), (n, n)).into_owned();
        let a = f.view((n, 0), (n, n)).into_owned();
        let mut re = orthonormalize(&re0, tol);
        let mut im = orthonormalize(&im0, tol);
        levels.push(block_diag(&re, &im));
        ranks.push(re.ncols() + im.ncols());
        while !stable(&ranks) && levels.len() <= j_max {
            let re_next = extend(&re, &neg_k * &im, tol);
            let im_next = extend(&im, &a * &re, tol);
            re = re_next;
            im = im_next;
            levels.push(block_diag(&re, &im));
            ranks.push(re.ncols() + im.ncols());
        }
    } else {
        let f = generator_matrix(params);
        let mut basis = orthonormalize(initial, tol);
        levels.push(basis.clone());
        ranks.push(basis.ncols());
        while !stable(&ranks) && levels.len() <= j_max {
            basis = extend(&basis, &f * &basis, tol);
            ranks.push(basis.ncols());
            levels.push(basis.clone());
        }
    }
    let status = if stable(&ranks) { LadderStatus::Stabilized } else { LadderStatus::Partial };
    SaturationLadder { levels, ranks, status }
}

/// Unit `H³`-normal of the tangent hyperplane `Re⟨ξ, φ⟩ = 0`, i.e. the stacked
/// vector `D⁻³φ` with `D = diag(k²π²)`.
fn tangent_normal(params: &ProblemParams) -> DVector<f64> {
    let n = params.truncation();
    let phi = params.phi();
    let mut v = DVector::zeros(2 * n);
    for k in 0..n {
        v[k] = phi.coeffs()[k].re / laplacian_eigenvalue(k + 1).powi(3);
    }
    v
}

/// `𝒫₁`: the `H³`-orthogonal projection onto the tangent space at `φ`.
pub fn tangent_projection(params: &ProblemParams) -> DMatrix<f64> {
    let n = params.truncation();
    let normal = tangent_normal(params);
    let mut phi = DVector::zeros(2 * n);
    for k in 0..n {
        phi[k] = params.phi().coeffs()[k].re;
    }
    DMatrix::identity(2 * n, 2 * n) - &normal * phi.transpose() / normal.dot(&phi)
}

#[derive(Clone, Debug)]
pub struct SaturationVerdict {
    pub saturating: bool,
    /// `2N − 1 − rank 𝒫₁ℋ_∞`.
    pub codim: usize,
    pub tangent_rank: usize,
    /// Unit direction of the tangent space missed by `𝒫₁ℋ_∞`, when it exists.
    pub missed: Option<ModalState>,
}

pub fn saturation_verdict(ladder: &SaturationLadder, params: &ProblemParams, tol: f64) -> SaturationVerdict {
    let n = params.truncation();
    let dim = 2 * n;
    let target = dim - 1;
    let projected = tangent_projection(params) * ladder.last();
    let range = orthonormalize(&projected, tol);
    let tangent_rank = range.ncols().min(target);
    let codim = target - tangent_rank;
    let missed = (codim > 0).then(|| {
        let mut phi = DVector::zeros(dim);
        for k in 0..n {
            phi[k] = params.phi().coeffs()[k].re;
        }
        let mut spanning = DMatrix::zeros(dim, range.ncols() + 1);
        spanning.view_mut((0, 0), (dim, range.ncols())).copy_from(&range);
        spanning.set_column(range.ncols(), &phi);
        let comp = orthogonal_complement(&orthonormalize(&spanning, tol), dim);
        let mut d = comp.column(0).into_owned();
        // deterministic sign: largest entry positive
        let imax = d.iamax();
        if d[imax] < 0.0 {
            d.neg_mut();
        }
        ModalState::from_stacked(d.as_slice())
    });
    SaturationVerdict { saturating: codim == 0, codim, tangent_rank, missed }
}

/// Operator `A_κ = −∂² − π² + 2κφ₁²` at truncation `n` on a `4n` grid.
pub fn kappa_operator(kappa: f64, n: usize) -> Result<SpectralOperator> {
    let m = GRID_FACTOR * n;
    let pi2 = laplacian_eigenvalue(1);
    let v = SampledField::from_fn(m, |x| 2.0 * kappa * Builtin::Phi1Sq.eval(x) - pi2);
    build_operator(&v, n)
}

#[derive(Clone, Debug, Serialize)]
pub struct DerivativeCheck {
    pub kappa: f64,
    pub k: usize,
    pub lambda: f64,
    pub fd: f64,
    pub hf: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Crossing {
    pub k: usize,
    pub kappa_star: f64,
    /// `|λ_{k,κ*}|`.
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct KappaSweepResult {
    pub kappa_grid: Vec<f64>,
    /// `eigen_tracks[k-1][i] = λ_{k, κ_i}`.
    pub eigen_tracks: Vec<Vec<f64>>,
    pub crossings: Vec<Crossing>,
    pub derivative_checks: Vec<DerivativeCheck>,
    pub strictly_increasing: bool,
}

impl KappaSweepResult {
    pub fn max_hf_error(&self) -> f64 {
        self.derivative_checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("kappa,k,lambda,dlambda_fd,dlambda_hf\n");
        for c in &self.derivative_checks {
            let _ = writeln!(s, "{:.12e},{},{:.12e},{:.12e},{:.12e}", c.kappa, c.k, c.lambda, c.fd, c.hf);
        }
        s
    }

    pub fn crossings_csv(&self) -> String {
        let mut s = String::from("k,kappa_star,bisection_residual\n");
        for c in &self.crossings {
            let _ = writeln!(s, "{},{:.12e},{:.3e}", c.k, c.kappa_star, c.residual);
        }
        s
    }
}

/// `⟨2φ₁², φ_{k,κ}²⟩`.
fn hellmann_feynman(op: &SpectralOperator, k: usize, weight: &DMatrix<f64>) -> f64 {
    let v = op.eigenvector_matrix().column(k - 1);
    v.dot(&(weight * v))
}

fn eigenvalue_at(kappa: f64, k: usize, n: usize) -> Result<f64> {
    Ok(kappa_operator(kappa, n)?.eigenvalue(k))
}

pub fn kappa_sweep(k_max: usize, kappa_lo: f64, kappa_hi: f64, samples: usize, n: usize) -> Result<KappaSweepResult> {
    if !(kappa_lo < kappa_hi) {
        return Err(Error::Invalid(format!("empty range [{kappa_lo}, {kappa_hi}]")));
    }
    if samples < 2 {
        return Err(Error::Invalid("need at least two samples".into()));
    }
    if k_max == 0 || k_max > n / 2 {
        return Err(Error::Invalid(format!("k_max = {k_max} must lie in 1..={} for N = {n}", n / 2)));
    }
    let kappa_grid: Vec<f64> = (0..samples)
        .map(|i| {
            if i + 1 == samples {
                kappa_hi
            } else {
                kappa_lo + (kappa_hi - kappa_lo) * i as f64 / (samples - 1) as f64
            }
        })
        .collect();
    let m = GRID_FACTOR * n;
    let weight = crate::spectral::SineGrid::new(n, m)?
        .multiplication_matrix(Builtin::Phi1Sq.sample(m).map(|v| 2.0 * v).values());
    let fd_h = 1e-4;
    let rows: Vec<Result<(Vec<f64>, Vec<DerivativeCheck>)>> = kappa_grid
        .par_iter()
        .map(|&kappa| {
            let op = kappa_operator(kappa, n)?;
            let plus = kappa_operator(kappa + fd_h, n)?;
            let minus = kappa_operator(kappa - fd_h, n)?;
            let lambdas: Vec<f64> = (1..=k_max).map(|k| op.eigenvalue(k)).collect();
            let checks = (1..=k_max)
                .map(|k| {
                    let fd = (plus.eigenvalue(k) - minus.eigenvalue(k)) / (2.0 * fd_h);
                    let hf = hellmann_feynman(&op, k, &weight);
                    DerivativeCheck { kappa, k, lambda: op.eigenvalue(k), fd, hf, rel_err: (fd - hf).abs() / hf.abs() }
                })
                .collect();
            Ok((lambdas, checks))
        })
        .collect();
    let mut eigen_tracks = vec![Vec::with_capacity(samples); k_max];
    let mut derivative_checks = Vec::with_capacity(samples * k_max);
    for row in rows {
        let (lambdas, checks) = row?;
        for (k, l) in lambdas.into_iter().enumerate() {
            eigen_tracks[k].push(l);
        }
        derivative_checks.extend(checks);
    }
    let strictly_increasing = eigen_tracks.iter().all(|t| t.windows(2).all(|w| w[1] > w[0]));

    let zero_tol = 1e-10;
    let mut crossings = Vec::new();
    for (ki, track) in eigen_tracks.iter().enumerate() {
        let k = ki + 1;
        let mut found: Option<f64> = None;
        if track[0].abs() <= zero_tol {
            found = Some(kappa_grid[0]);
        }
        for i in 0..samples - 1 {
            if found.is_some() {
                break;
            }
            let (a, b) = (track[i], track[i + 1]);
            if b.abs() <= zero_tol {
                found = Some(kappa_grid[i + 1]);
            } else if a < 0.0 && b > 0.0 {
                found = Some(bisect(k, n, &weight, kappa_grid[i], kappa_grid[i + 1])?);
            }
        }
        if let Some(kappa_star) = found {
            crossings.push(Crossing { k, kappa_star, residual: eigenvalue_at(kappa_star, k, n)?.abs() });
        }
    }
    crossings.sort_by(|a, b| a.kappa_star.total_cmp(&b.kappa_star).then(a.k.cmp(&b.k)));
    Ok(KappaSweepResult { kappa_grid, eigen_tracks, crossings, derivative_checks, strictly_increasing })
}

/// Bisection for `λ_{k,κ} = 0` on a bracket with `λ(lo) < 0 < λ(hi)`, down
/// to width `1e-10`, then Newton steps with the Hellmann–Feynman slope while
/// they keep reducing `|λ|`.
fn bisect(k: usize, n: usize, weight: &DMatrix<f64>, mut lo: f64, mut hi: f64) -> Result<f64> {
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        let v = eigenvalue_at(mid, k, n)?;
        if v == 0.0 {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut kappa = 0.5 * (lo + hi);
    let mut op = kappa_operator(kappa, n)?;
    for _ in 0..3 {
        let lam = op.eigenvalue(k);
        let next = kappa - lam / hellmann_feynman(&op, k, weight);
        let next_op = kappa_operator(next, n)?;
        if next_op.eigenvalue(k).abs() >= lam.abs() || (next - kappa).abs() > hi - lo {
            break;
        }
        kappa = next;
        op = next_op;
    }
    Ok(kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Builtin;
    use std::f64::consts::PI;

    fn params(kappa: f64, n: usize, fields: &[Builtin]) -> ProblemParams {
        let m = GRID_FACTOR * n;
        ProblemParams::standard(kappa, n)
            .unwrap()
            .with_fields(fields.iter().map(|b| b.sample(m)).collect())
            .unwrap()
    }

    #[test]
    fn generator_annihilates_ground_state_without_coupling() {
        let p = params(0.0, 8, &[Builtin::One]);
        let out = apply_generator(&ModalState::basis(1, 8), &p).unwrap();
        assert!(out.norm_l2() < 1e-10);
    }

    #[test]
    fn generator_high_mode_coefficient() {
        let n = 8;
        let kappa = 0.5;
        let p = params(kappa, n, &[Builtin::One]);
        let k = 2 * n - 1;
        // mode 2N−1 is out of range at truncation N, so use the largest odd mode
        let k = k.min(n - 1);
        let out = apply_generator(&ModalState::basis(k, n), &p).unwrap();
        let c = PI * PI * ((k * k) as f64 - 1.0);
        // W = 2κφ₁² = 2κ(1 − cos 2πx): diagonal 2κ, off-diagonal −κ to k ± 2
        assert!((out.coeff(k).im - (c + 2.0 * kappa)).abs() < 1e-9);
        assert!((out.coeff(k - 2).im + kappa).abs() < 1e-9);
        assert!(out.coeff(k).re.abs() < 1e-12);
    }

    #[test]
    fn constant_field_alone_is_not_saturating() {
        let p = params(0.5, 8, &[Builtin::One]);
        let ladder = build_ladder(&p, 20, 1e-8);
        // odd modes only: 4 of them, real and imaginary
        assert_eq!(*ladder.ranks.last().unwrap(), 8);
        assert!(ladder.ranks.windows(2).all(|w| w[1] >= w[0]));
        let v = saturation_verdict(&ladder, &p, 1e-8);
        assert!(!v.saturating);
        assert!(v.codim > 0);
    }

    #[test]
    fn empty_field_codim() {
        let p = params(0.5, 6, &[]);
        let ladder = build_ladder(&p, 5, 1e-8);
        let v = saturation_verdict(&ladder, &p, 1e-8);
        assert_eq!(v.codim, 11);
    }

    #[test]
    fn sweep_rejects_bad_range() {
        assert!(kappa_sweep(3, 0.0, -1.0, 10, 16).is_err());
        assert!(kappa_sweep(9, -1.0, 0.0, 10, 16).is_err());
    }
}
