//! Dirichlet sine basis on (0, 1), trapezoid quadrature, Sobolev norms and
//! Galerkin eigensolves of `-d²/dx² + V`.
//!
//! Modal coefficients are taken with respect to `φ_k(x) = √2 sin(kπx)`, `k = 1..N`.
//! Fields live on the uniform grid `x_j = j/M`, `j = 0..M`. Products of two
//! sines vanish quadratically at both endpoints, so the composite trapezoid
//! rule is spectrally accurate for the integrands that appear here and exact
//! for trigonometric polynomials of degree below `2M`.

use std::f64::consts::{PI, SQRT_2};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Default ratio between grid intervals and modal truncation.
pub const GRID_FACTOR: usize = 4;

/// Eigenvalue `k²π²` of the Dirichlet Laplacian.
#[inline]
pub fn laplacian_eigenvalue(k: usize) -> f64 {
    let kf = k as f64;
    kf * kf * PI * PI
}

/// Complex coefficient sequence over the sine basis.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalState {
    coeffs: Vec<C64>,
}

impl ModalState {
    pub fn new(coeffs: Vec<C64>) -> Self {
        Self { coeffs }
    }

    pub fn zeros(n: usize) -> Self {
        Self { coeffs: vec![C64::new(0.0, 0.0); n] }
    }

    /// The basis function `φ_k` (1-based) at truncation `n`.
    pub fn basis(k: usize, n: usize) -> Self {
        assert!(k >= 1 && k <= n, "basis index {k} outside 1..={n}");
        let mut s = Self::zeros(n);
        s.coeffs[k - 1] = C64::new(1.0, 0.0);
        s
    }

    pub fn from_real(values: &[f64]) -> Self {
        Self { coeffs: values.iter().map(|&v| C64::new(v, 0.0)).collect() }
    }

    /// Inverse of [`ModalState::to_stacked`].
    pub fn from_stacked(x: &[f64]) -> Self {
        assert!(x.len().is_multiple_of(2), "stacked vector must have even length");
        let n = x.len() / 2;
        Self { coeffs: (0..n).map(|k| C64::new(x[k], x[n + k])).collect() }
    }

    /// Real representation `(Re c_1, …, Re c_N, Im c_1, …, Im c_N)`.
    pub fn to_stacked(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self.coeffs.iter().map(|c| c.re).collect();
        x.extend(self.coeffs.iter().map(|c| c.im));
        x
    }

    pub fn truncation(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<C64> {
        self.coeffs
    }

    /// Coefficient of `φ_k`, 1-based.
    pub fn coeff(&self, k: usize) -> C64 {
        self.coeffs[k - 1]
    }

    pub fn conj(&self) -> Self {
        Self { coeffs: self.coeffs.iter().map(|c| c.conj()).collect() }
    }

    pub fn scale(&self, a: C64) -> Self {
        Self { coeffs: self.coeffs.iter().map(|c| c * a).collect() }
    }

    /// Zero-padded or truncated copy at truncation `n`.
    pub fn resized(&self, n: usize) -> Self {
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(n, C64::new(0.0, 0.0));
        Self { coeffs }
    }

    /// `∫ f ḡ` computed modally.
    pub fn inner_complex(&self, other: &Self) -> C64 {
        assert_eq!(self.truncation(), other.truncation(), "truncation mismatch");
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b.conj()).sum()
    }

    /// `⟨f, g⟩_{L²} = Re ∫ f ḡ`.
    pub fn inner_l2(&self, other: &Self) -> f64 {
        self.inner_complex(other).re
    }

    pub fn norm_l2(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn sobolev_norm(&self, s: f64) -> f64 {
        sobolev_norm(self, s)
    }

    /// `Re⟨self, phi⟩ = 0` within `tol`.
    pub fn is_tangent(&self, phi: &Self, tol: f64) -> bool {
        self.inner_l2(phi).abs() <= tol
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

impl Add for &ModalState {
    type Output = ModalState;
    fn add(self, rhs: &ModalState) -> ModalState {
        assert_eq!(self.truncation(), rhs.truncation(), "truncation mismatch");
        ModalState { coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a + b).collect() }
    }
}

impl Sub for &ModalState {
    type Output = ModalState;
    fn sub(self, rhs: &ModalState) -> ModalState {
        assert_eq!(self.truncation(), rhs.truncation(), "truncation mismatch");
        ModalState { coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a - b).collect() }
    }
}

impl AddAssign<&ModalState> for ModalState {
    fn add_assign(&mut self, rhs: &ModalState) {
        assert_eq!(self.truncation(), rhs.truncation(), "truncation mismatch");
        for (a, b) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *a += b;
        }
    }
}

impl Mul<f64> for &ModalState {
    type Output = ModalState;
    fn mul(self, a: f64) -> ModalState {
        ModalState { coeffs: self.coeffs.iter().map(|c| c * a).collect() }
    }
}

impl Neg for &ModalState {
    type Output = ModalState;
    fn neg(self) -> ModalState {
        self * -1.0
    }
}

/// Real samples on a uniform grid of `M + 1` points over `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledField {
    values: Vec<f64>,
}

impl SampledField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 3 {
            return Err(Error::Invalid("a field needs at least 3 grid points".into()));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("field sample {j} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn from_fn(m: usize, f: impl Fn(f64) -> f64) -> Self {
        assert!(m >= 2, "grid needs at least two intervals");
        Self { values: (0..=m).map(|j| f(j as f64 / m as f64)).collect() }
    }

    pub fn constant(m: usize, c: f64) -> Self {
        Self::from_fn(m, |_| c)
    }

    pub fn zeros(m: usize) -> Self {
        Self::constant(m, 0.0)
    }

    /// Number of grid intervals `M`.
    pub fn grid_size(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 / self.grid_size() as f64
    }

    /// Composite trapezoid `∫₀¹ f`.
    pub fn integral(&self) -> f64 {
        let m = self.grid_size();
        let inner: f64 = self.values[1..m].iter().sum();
        (inner + 0.5 * (self.values[0] + self.values[m])) / m as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.grid_size() != other.grid_size() {
            return Err(Error::Shape(format!(
                "grid sizes {} and {} differ",
                self.grid_size(),
                other.grid_size()
            )));
        }
        Ok(Self { values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect() })
    }

    /// Boundary conditions `W(0) = W(1) = W'(0) = W'(1) = 0`, with one-sided
    /// fourth-order differences for the derivatives (needs `M ≥ 4`).
    pub fn boundary_defect(&self) -> f64 {
        let v = &self.values;
        let m = self.grid_size();
        let h = 1.0 / m as f64;
        let one_sided = |a: f64, b: f64, c: f64, d: f64, e: f64| {
            (-25.0 * a + 48.0 * b - 36.0 * c + 16.0 * d - 3.0 * e) / (12.0 * h)
        };
        let (d0, d1) = if m >= 4 {
            (one_sided(v[0], v[1], v[2], v[3], v[4]), -one_sided(v[m], v[m - 1], v[m - 2], v[m - 3], v[m - 4]))
        } else {
            ((v[1] - v[0]) / h, (v[m] - v[m - 1]) / h)
        };
        [v[0], v[m], d0, d1].iter().fold(0.0_f64, |a, x| a.max(x.abs()))
    }
}

/// Sine table for a fixed `(N, M)` pair: `table[(j-1, k-1)] = √2 sin(kπ j/M)`
/// on the interior nodes.
#[derive(Clone, Debug)]
pub struct SineGrid {
    n: usize,
    m: usize,
    table: DMatrix<f64>,
}

impl SineGrid {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("truncation must be positive".into()));
        }
        if m < n {
            return Err(Error::Aliasing { grid: m, modes: n });
        }
        let table = DMatrix::from_fn(m - 1, n, |j, k| {
            SQRT_2 * (((k + 1) * (j + 1)) as f64 * PI / m as f64).sin()
        });
        Ok(Self { n, m, table })
    }

    pub fn modes(&self) -> usize {
        self.n
    }

    pub fn grid_size(&self) -> usize {
        self.m
    }

    /// Interior sine table, `(M-1) × N`.
    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    /// Samples on all `M + 1` nodes.
    pub fn synthesize(&self, state: &ModalState) -> Vec<C64> {
        assert_eq!(state.truncation(), self.n, "truncation mismatch");
        let mut out = vec![C64::new(0.0, 0.0); self.m + 1];
        for (j, o) in out[1..self.m].iter_mut().enumerate() {
            let row = self.table.row(j);
            *o = row.iter().zip(state.coeffs()).map(|(s, c)| c * *s).sum();
        }
        out
    }

    pub fn synthesize_real(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.n, "truncation mismatch");
        let mut out = vec![0.0; self.m + 1];
        for (j, o) in out[1..self.m].iter_mut().enumerate() {
            *o = self.table.row(j).iter().zip(coeffs).map(|(s, c)| s * c).sum();
        }
        out
    }

    /// Trapezoid projection onto `φ_1..φ_N`; endpoint samples are ignored.
    pub fn analyze(&self, samples: &[C64]) -> ModalState {
        assert_eq!(samples.len(), self.m + 1, "grid size mismatch");
        let w = 1.0 / self.m as f64;
        let coeffs = (0..self.n)
            .map(|k| {
                let col = self.table.column(k);
                col.iter().zip(&samples[1..self.m]).map(|(s, f)| f * *s).sum::<C64>() * w
            })
            .collect();
        ModalState::new(coeffs)
    }

    pub fn analyze_real(&self, samples: &[f64]) -> Vec<f64> {
        assert_eq!(samples.len(), self.m + 1, "grid size mismatch");
        let w = 1.0 / self.m as f64;
        (0..self.n)
            .map(|k| self.table.column(k).iter().zip(&samples[1..self.m]).map(|(s, f)| s * f).sum::<f64>() * w)
            .collect()
    }

    /// Galerkin matrix of the multiplication operator, `∫ ρ φ_j φ_k`.
    pub fn multiplication_matrix(&self, rho: &[f64]) -> DMatrix<f64> {
        assert_eq!(rho.len(), self.m + 1, "grid size mismatch");
        let w = 1.0 / self.m as f64;
        let mut weighted = self.table.clone();
        for (j, mut row) in weighted.row_iter_mut().enumerate() {
            row *= rho[j + 1] * w;
        }
        self.table.transpose() * weighted
    }
}

/// Samples `Σ c_k √2 sin(kπ x_j)` at `x_j = j/M`.
pub fn modal_to_grid(state: &ModalState, m: usize) -> Result<Vec<C64>> {
    Ok(SineGrid::new(state.truncation(), m)?.synthesize(state))
}

/// Projects grid samples onto the first `n` sine modes.
pub fn grid_to_modal(samples: &[C64], n: usize) -> Result<ModalState> {
    if samples.len() < 3 {
        return Err(Error::Invalid("need at least 3 samples".into()));
    }
    let m = samples.len() - 1;
    if m < 2 * n {
        return Err(Error::Aliasing { grid: m, modes: n });
    }
    let scale = samples.iter().fold(1.0_f64, |a, s| a.max(s.norm()));
    let (left, right) = (samples[0].norm(), samples[m].norm());
    if left > 1e-12 * scale || right > 1e-12 * scale {
        return Err(Error::DirichletViolation { left, right });
    }
    Ok(SineGrid::new(n, m)?.analyze(samples))
}

/// Trapezoid `∫ f ḡ` for grid samples.
pub fn inner_complex_grid(f: &[C64], g: &[C64]) -> Result<C64> {
    if f.len() != g.len() || f.len() < 3 {
        return Err(Error::Shape(format!("grid lengths {} and {}", f.len(), g.len())));
    }
    let m = f.len() - 1;
    let inner: C64 = f[1..m].iter().zip(&g[1..m]).map(|(a, b)| a * b.conj()).sum();
    let ends = 0.5 * (f[0] * g[0].conj() + f[m] * g[m].conj());
    Ok((inner + ends) / m as f64)
}

/// `Re ∫ f ḡ` for grid samples.
pub fn inner_l2_grid(f: &[C64], g: &[C64]) -> Result<f64> {
    inner_complex_grid(f, g).map(|z| z.re)
}

/// `(Σ (k²π²)^s |c_k|²)^{1/2}`; `s = 0` is the L² norm.
pub fn sobolev_norm(state: &ModalState, s: f64) -> f64 {
    state
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, c)| laplacian_eigenvalue(i + 1).powf(s) * c.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// `⟨f, g⟩_{(s)} = Re Σ (k²π²)^s f_k ḡ_k`.
pub fn sobolev_inner(f: &ModalState, g: &ModalState, s: f64) -> f64 {
    assert_eq!(f.truncation(), g.truncation(), "truncation mismatch");
    f.coeffs()
        .iter()
        .zip(g.coeffs())
        .enumerate()
        .map(|(i, (a, b))| laplacian_eigenvalue(i + 1).powf(s) * (a * b.conj()).re)
        .sum()
}

/// H³ weights `(kπ)³` for each coefficient of the stacked real representation.
pub fn stacked_h3_weights(n: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|k| laplacian_eigenvalue(k).powf(1.5)).collect();
    w.iter().chain(w.iter()).copied().collect()
}

/// Ascending eigenpairs of the Galerkin discretisation of `A_V = -∂² + V`.
#[derive(Clone, Debug)]
pub struct SpectralOperator {
    eigenvalues: Vec<f64>,
    /// Column `k-1` holds the sine coefficients of `φ_{k,V}`.
    eigenvectors: DMatrix<f64>,
    galerkin: DMatrix<f64>,
    potential: SampledField,
    grid: SineGrid,
}

impl SpectralOperator {
    pub fn truncation(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Largest index whose eigenpair is not polluted by truncation.
    pub fn trusted(&self) -> usize {
        (self.truncation() / 2).max(1)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `λ_{k,V}`, 1-based.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.eigenvalues[k - 1]
    }

    pub fn eigenvector_matrix(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn eigenvector(&self, k: usize) -> ModalState {
        ModalState::from_real(self.eigenvectors.column(k - 1).as_slice())
    }

    pub fn ground_state(&self) -> ModalState {
        self.eigenvector(1)
    }

    pub fn ground_energy(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn galerkin_matrix(&self) -> &DMatrix<f64> {
        &self.galerkin
    }

    pub fn potential(&self) -> &SampledField {
        &self.potential
    }

    pub fn grid(&self) -> &SineGrid {
        &self.grid
    }

    /// `‖G v_k − λ_k v_k‖`.
    pub fn residual(&self, k: usize) -> f64 {
        let v = self.eigenvectors.column(k - 1);
        (&self.galerkin * v - v * self.eigenvalues[k - 1]).norm()
    }

    /// `max |⟨v_j, v_k⟩ − δ_jk|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.eigenvectors.transpose() * &self.eigenvectors;
        let n = self.truncation();
        let mut worst = 0.0_f64;
        for j in 0..n {
            for k in 0..n {
                let target = if j == k { 1.0 } else { 0.0 };
                worst = worst.max((g[(j, k)] - target).abs());
            }
        }
        worst
    }

    /// Applies the Galerkin operator to a modal state.
    pub fn apply(&self, state: &ModalState) -> ModalState {
        apply_real_matrix(&self.galerkin, state)
    }
}

pub(crate) fn apply_real_matrix(mat: &DMatrix<f64>, state: &ModalState) -> ModalState {
    let n = state.truncation();
    assert_eq!(mat.ncols(), n, "dimension mismatch");
    let coeffs = (0..mat.nrows())
        .map(|j| (0..n).map(|k| state.coeffs()[k] * mat[(j, k)]).sum())
        .collect();
    ModalState::new(coeffs)
}

/// Ascending eigendecomposition of a real symmetric matrix; eigenvector signs
/// are fixed so that the first entry above `1e-10·max` is positive.
pub(crate) fn sorted_symmetric_eigen(mat: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = mat.nrows();
    let eig = SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: DVector<f64> = eig.eigenvectors.column(src).into_owned();
        let scale = col.amax();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-10 * scale) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Assembles `k²π² δ_jk + ⟨V φ_j, φ_k⟩` on the potential's grid and solves
/// the symmetric eigenproblem.
pub fn build_operator(potential: &SampledField, n: usize) -> Result<SpectralOperator> {
    let m = potential.grid_size();
    if n == 0 {
        return Err(Error::Invalid("truncation must be positive".into()));
    }
    if m < 2 * n {
        return Err(Error::Aliasing { grid: m, modes: n });
    }
    let grid = SineGrid::new(n, m)?;
    let mut galerkin = grid.multiplication_matrix(potential.values());
    for k in 0..n {
        galerkin[(k, k)] += laplacian_eigenvalue(k + 1);
    }
    // exact symmetry
    let galerkin = (&galerkin + galerkin.transpose()) * 0.5;
    let (eigenvalues, eigenvectors) = sorted_symmetric_eigen(galerkin.clone());
    Ok(SpectralOperator { eigenvalues, eigenvectors, galerkin, potential: potential.clone(), grid })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        })
    }
}

/// Remainders `r_k = λ_{k,V} − k²π² − ∫V` over the trusted range.
#[derive(Clone, Debug)]
pub struct AsymptoticsReport {
    pub residuals: Vec<f64>,
    /// Running sums of `r_k²`.
    pub partial_sums: Vec<f64>,
    pub verdict: Verdict,
    /// The plateau test is a heuristic surrogate for ℓ² membership.
    pub note: &'static str,
}

pub fn check_asymptotics(op: &SpectralOperator) -> AsymptoticsReport {
    let mean = op.potential().integral();
    let residuals: Vec<f64> = (1..=op.trusted())
        .map(|k| op.eigenvalue(k) - laplacian_eigenvalue(k) - mean)
        .collect();
    let partial_sums: Vec<f64> = residuals
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r * r;
            Some(*acc)
        })
        .collect();
    // plateau: squared increments nonincreasing over the upper half
    let half = residuals.len() / 2;
    let floor = 1e-20;
    let plateau = residuals[half..]
        .windows(2)
        .all(|w| w[1] * w[1] <= w[0] * w[0] * (1.0 + 1e-9) + floor);
    AsymptoticsReport {
        residuals,
        partial_sums,
        verdict: Verdict::from_bool(plateau),
        note: "surrogate: squared remainders nonincreasing on the upper half of the trusted range",
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct MuRow {
    pub k: usize,
    /// `∫ μ φ φ_{k,V}`.
    pub coefficient: f64,
    /// `k³ |coefficient|`.
    pub scaled: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct MuBoundReport {
    pub c_est: f64,
    pub argmin: usize,
    pub rows: Vec<MuRow>,
    pub verdict: Verdict,
    /// First index whose coefficient vanishes to `1e-12`.
    pub zero_at: Option<usize>,
}

/// Coefficients `⟨μ φ, φ_{k,V}⟩` for `k = 1..=count`.
pub fn mu_coefficients(mu: &SampledField, op: &SpectralOperator, count: usize) -> Result<Vec<f64>> {
    if mu.grid_size() != op.grid().grid_size() {
        return Err(Error::Shape(format!(
            "mu grid {} differs from operator grid {}",
            mu.grid_size(),
            op.grid().grid_size()
        )));
    }
    if count > op.truncation() {
        return Err(Error::Invalid(format!("{count} coefficients requested at truncation {}", op.truncation())));
    }
    let grid = op.grid();
    let phi = grid.synthesize_real(op.eigenvectors.column(0).as_slice());
    let weighted: Vec<f64> = phi.iter().zip(mu.values()).map(|(p, m)| p * m).collect();
    let proj = grid.analyze_real(&weighted);
    Ok((1..=count)
        .map(|k| op.eigenvectors.column(k - 1).iter().zip(&proj).map(|(a, b)| a * b).sum())
        .collect())
}

/// Estimates `c = min_{k ≤ K} k³ |⟨μφ, φ_{k,V}⟩|`.
pub fn verify_mu_bound(mu: &SampledField, op: &SpectralOperator, k_max: usize, tol: f64) -> Result<MuBoundReport> {
    if k_max == 0 || k_max > op.trusted() {
        return Err(Error::Invalid(format!(
            "K={k_max} outside trusted range 1..={} (raise the truncation)",
            op.trusted()
        )));
    }
    let coeffs = mu_coefficients(mu, op, k_max)?;
    let rows: Vec<MuRow> = coeffs
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let k = i + 1;
            MuRow { k, coefficient: c, scaled: (k as f64).powi(3) * c.abs() }
        })
        .collect();
    let zero_at = rows.iter().find(|r| r.coefficient.abs() < 1e-12).map(|r| r.k);
    let (argmin, c_est) = rows
        .iter()
        .map(|r| (r.k, r.scaled))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty range");
    let verdict = Verdict::from_bool(zero_at.is_none() && c_est > tol);
    Ok(MuBoundReport { c_est, argmin, rows, verdict, zero_at })
}
