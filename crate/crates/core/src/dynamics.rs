//! Time propagation: the real-linear controlled equation around the ground
//! state, the bilinear NLS, its exact discrete linearization, and the
//! ξ₁/ξ₂ split.
//!
//! The linear flow `i∂ₜξ = (A_V − λ)ξ + W·Re ξ + ⟨v,Q⟩φ` is solved exactly
//! for piecewise-constant `v` in the stacked `(Re, Im)` representation.
//!
//! The NLS uses the implicit exponential midpoint rule on the Galerkin
//! Hamiltonian `H(ρ) = A_V + G(ρ)`, `ρ = κ|ψ|^{2p} + ⟨u,Q⟩`:
//!
//! ```text
//! ψ̃ = exp(−iΔ/2 · H(ρ(ψ̃))) ψₙ,    ψₙ₊₁ = exp(−iΔ/2 · H(ρ(ψ̃))) ψ̃
//! ```
//!
//! Each half step is unitary, so the L² norm is preserved to roundoff. The
//! scheme is symmetric and commutes with conjugation, so the conjugate
//! time-reversal identity holds to roundoff as well.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::standard_fields;
use crate::linalg::{exact_step, phi1, phi_ramp, real_form, sorted_svd, stack_rows};
use crate::spectral::{
    build_operator, sorted_symmetric_eigen, ModalState, SampledField, SpectralOperator, C64, GRID_FACTOR,
};

const MAX_FIXED_POINT: usize = 60;
const SPAN_TOL: f64 = 1e-10;

/// Piecewise-constant control on a time grid `0 = t₀ < … < t_m = T`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlSignal {
    times: Vec<f64>,
    /// `values[j]` holds `u` on `[t_j, t_{j+1})`.
    values: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 || values.len() + 1 != times.len() {
            return Err(Error::Shape(format!("{} times for {} intervals", times.len(), values.len())));
        }
        if times[0] != 0.0 {
            return Err(Error::TimeGridMismatch(format!("grid starts at {} instead of 0", times[0])));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::TimeGridMismatch("times must be finite and strictly increasing".into()));
        }
        let q = values[0].len();
        if values.iter().any(|v| v.len() != q) {
            return Err(Error::Shape("control rows differ in length".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("control values must be finite".into()));
        }
        Ok(Self { times, values })
    }

    /// Equal bins over `[0, horizon]`.
    pub fn uniform(horizon: f64, values: Vec<Vec<f64>>) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::Invalid(format!("horizon {horizon} must be positive")));
        }
        let m = values.len();
        if m == 0 {
            return Err(Error::Shape("a control needs at least one interval".into()));
        }
        let mut times: Vec<f64> = (0..=m).map(|j| horizon * j as f64 / m as f64).collect();
        times[m] = horizon;
        Self::new(times, values)
    }

    pub fn constant(horizon: f64, value: Vec<f64>) -> Result<Self> {
        Self::uniform(horizon, vec![value])
    }

    pub fn zeros(horizon: f64, channels: usize, bins: usize) -> Result<Self> {
        Self::uniform(horizon, vec![vec![0.0; channels]; bins])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    pub fn channels(&self) -> usize {
        self.values[0].len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty grid")
    }

    /// Index of the interval containing `t`; `t ≥ T` maps to the last one.
    pub fn interval_at(&self, t: f64) -> usize {
        let m = self.values.len();
        match self.times[1..m].binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
    }

    pub fn value_at(&self, t: f64) -> &[f64] {
        &self.values[self.interval_at(t)]
    }

    /// `(Σ_j |u_j|² Δt_j)^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .zip(self.times.windows(2))
            .map(|(u, w)| u.iter().map(|x| x * x).sum::<f64>() * (w[1] - w[0]))
            .sum::<f64>()
            .sqrt()
    }

    /// `t ↦ u(T − t)`.
    pub fn reversed(&self) -> Self {
        let t_end = self.horizon();
        let mut times: Vec<f64> = self.times.iter().rev().map(|t| t_end - t).collect();
        times[0] = 0.0;
        let last = times.len() - 1;
        times[last] = t_end;
        let values = self.values.iter().rev().cloned().collect();
        Self { times, values }
    }

    /// `self` on `[0, T₁]` followed by `other` shifted to `[T₁, T₁ + T₂]`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.channels() != other.channels() {
            return Err(Error::Shape(format!("{} vs {} channels", self.channels(), other.channels())));
        }
        let shift = self.horizon();
        let mut times = self.times.clone();
        times.extend(other.times[1..].iter().map(|t| t + shift));
        let mut values = self.values.clone();
        values.extend(other.values.iter().cloned());
        Self::new(times, values)
    }

    /// Pointwise sum; both signals must share the same time grid.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.combine(other, 1.0)
    }

    /// `self + a·other` on a shared grid.
    pub fn combine(&self, other: &Self, a: f64) -> Result<Self> {
        if self.times.len() != other.times.len()
            || self.times.iter().zip(&other.times).any(|(x, y)| (x - y).abs() > 1e-12 * (1.0 + x.abs()))
        {
            return Err(Error::TimeGridMismatch("controls live on different grids".into()));
        }
        if self.channels() != other.channels() {
            return Err(Error::Shape(format!("{} vs {} channels", self.channels(), other.channels())));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(u, v)| u.iter().zip(v).map(|(x, y)| x + a * y).collect())
            .collect();
        Ok(Self { times: self.times.clone(), values })
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            times: self.times.clone(),
            values: self.values.iter().map(|u| u.iter().map(|x| a * x).collect()).collect(),
        }
    }

    /// Refines a constant signal onto `bins` equal intervals (values are
    /// sampled at bin midpoints, so this is exact when the grids nest).
    pub fn rebin(&self, bins: usize) -> Result<Self> {
        let t_end = self.horizon();
        let values = (0..bins)
            .map(|b| self.value_at(t_end * (b as f64 + 0.5) / bins as f64).to_vec())
            .collect();
        Self::uniform(t_end, values)
    }

    /// Bin-major flattening `[u_1(bin 0), …, u_q(bin 0), u_1(bin 1), …]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

/// Time integrator for the nonlinear flow. All are symmetric compositions of
/// the same unitary exponential-midpoint substep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Integrator {
    /// One substep per step; second order.
    Midpoint,
    /// Triple jump, three substeps; fourth order.
    TripleJump,
    /// Suzuki's five substeps; fourth order with a smaller error constant.
    Suzuki,
    /// Kahan–Li nine substeps; sixth order.
    KahanLi,
}

impl Integrator {
    /// Substep lengths as fractions of the step.
    pub fn fractions(self) -> Vec<f64> {
        match self {
            Integrator::Midpoint => vec![1.0],
            Integrator::TripleJump => {
                let g1 = 1.0 / (2.0 - 2f64.cbrt());
                vec![g1, 1.0 - 2.0 * g1, g1]
            }
            Integrator::Suzuki => {
                let p = 1.0 / (4.0 - 4f64.cbrt());
                vec![p, p, 1.0 - 4.0 * p, p, p]
            }
            Integrator::KahanLi => {
                #[allow(clippy::excessive_precision)]
                let g = [
                    0.392_161_444_007_314_139_28,
                    0.332_599_136_789_359_438_60,
                    -0.706_246_172_557_639_359_81,
                    0.082_213_596_293_550_800_23,
                ];
                let mid = 1.0 - 2.0 * g.iter().sum::<f64>();
                let mut out = g.to_vec();
                out.push(mid);
                out.extend(g.iter().rev());
                out
            }
        }
    }

    pub fn order(self) -> u32 {
        match self {
            Integrator::Midpoint => 2,
            Integrator::TripleJump | Integrator::Suzuki => 4,
            Integrator::KahanLi => 6,
        }
    }
}

/// Everything that defines a control problem around the ground state.
#[derive(Clone, Debug)]
pub struct ProblemParams {
    potential: SampledField,
    coupling: SampledField,
    coupling_is_default: bool,
    fields: Vec<SampledField>,
    operator: SpectralOperator,
    pub kappa: f64,
    pub p: u32,
    pub horizon: f64,
    pub steps: usize,
    /// Abort threshold for `‖ψ‖₍₃₎` in the nonlinear flow.
    pub h3_ceiling: f64,
    pub integrator: Integrator,
}

impl ProblemParams {
    pub fn new(
        potential: SampledField,
        fields: Vec<SampledField>,
        kappa: f64,
        p: u32,
        horizon: f64,
        n: usize,
    ) -> Result<Self> {
        if p == 0 {
            return Err(Error::Invalid("p must be a positive integer".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Invalid(format!("horizon {horizon} must be positive")));
        }
        if !kappa.is_finite() {
            return Err(Error::Invalid("kappa must be finite".into()));
        }
        let m = potential.grid_size();
        if let Some(f) = fields.iter().find(|f| f.grid_size() != m) {
            return Err(Error::Shape(format!("control field grid {} differs from potential grid {m}", f.grid_size())));
        }
        let operator = build_operator(&potential, n)?;
        let mut out = Self {
            coupling: SampledField::zeros(m),
            coupling_is_default: true,
            potential,
            fields,
            operator,
            kappa,
            p,
            horizon,
            steps: 2048,
            h3_ceiling: 1e3,
            integrator: Integrator::Suzuki,
        };
        out.coupling = out.default_coupling();
        Ok(out)
    }

    /// `V = 0`, `Q = (1, cos πx, cos 2πx, x²)`, `p = 1`, `T = 1` on a `4N` grid.
    pub fn standard(kappa: f64, n: usize) -> Result<Self> {
        let m = GRID_FACTOR * n;
        Self::new(SampledField::zeros(m), standard_fields(m), kappa, 1, 1.0, n)
    }

    fn default_coupling(&self) -> SampledField {
        let scale = 2.0 * self.p as f64 * self.kappa;
        self.ground_power().map(|v| scale * v)
    }

    /// Replaces the default `W = 2pκφ^{2p}`.
    pub fn with_coupling(mut self, w: SampledField) -> Result<Self> {
        if w.grid_size() != self.grid_size() {
            return Err(Error::Shape(format!("W grid {} differs from {}", w.grid_size(), self.grid_size())));
        }
        self.coupling = w;
        self.coupling_is_default = false;
        Ok(self)
    }

    /// Changes κ; a default coupling follows.
    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        if self.coupling_is_default {
            self.coupling = self.default_coupling();
        }
        self
    }

    pub fn with_fields(mut self, fields: Vec<SampledField>) -> Result<Self> {
        if let Some(f) = fields.iter().find(|f| f.grid_size() != self.grid_size()) {
            return Err(Error::Shape(format!("control field grid {} differs", f.grid_size())));
        }
        self.fields = fields;
        Ok(self)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps.max(1);
        self
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn potential(&self) -> &SampledField {
        &self.potential
    }

    pub fn coupling(&self) -> &SampledField {
        &self.coupling
    }

    pub fn fields(&self) -> &[SampledField] {
        &self.fields
    }

    pub fn channels(&self) -> usize {
        self.fields.len()
    }

    pub fn operator(&self) -> &SpectralOperator {
        &self.operator
    }

    pub fn phi(&self) -> ModalState {
        self.operator.ground_state()
    }

    pub fn lambda(&self) -> f64 {
        self.operator.ground_energy()
    }

    pub fn truncation(&self) -> usize {
        self.operator.truncation()
    }

    pub fn grid_size(&self) -> usize {
        self.potential.grid_size()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `φ^{2p}` on the grid.
    pub fn ground_power(&self) -> SampledField {
        let phi = self.operator.grid().synthesize_real(self.operator.eigenvector_matrix().column(0).as_slice());
        let p = self.p as i32;
        SampledField::new(phi.iter().map(|v| v.powi(2 * p)).collect()).expect("finite samples")
    }

    /// Warning text when `W` violates `W = W' = 0` at both ends.
    pub fn coupling_warning(&self) -> Option<String> {
        let defect = self.coupling.boundary_defect();
        let tol = 1e-2 * (1.0 + self.coupling.max_abs());
        (defect > tol).then(|| {
            format!("W violates W(0)=W(1)=W'(0)=W'(1)=0 (defect {defect:.3e}); H3 bound check disabled")
        })
    }

    /// Galerkin matrices `G(Q_c)` for each channel.
    pub fn field_matrices(&self) -> Vec<DMatrix<f64>> {
        let grid = self.operator.grid();
        self.fields.iter().map(|f| grid.multiplication_matrix(f.values())).collect()
    }

    /// Columns `G(Q_c) φ`, the source directions of the linear flow.
    pub fn source_matrix(&self) -> DMatrix<f64> {
        let phi = self.operator.eigenvector_matrix().column(0).into_owned();
        let mats = self.field_matrices();
        let mut s = DMatrix::zeros(self.truncation(), self.channels());
        for (c, g) in mats.iter().enumerate() {
            s.set_column(c, &(g * &phi));
        }
        s
    }

    fn check_control(&self, v: &ControlSignal) -> Result<()> {
        if v.channels() != self.channels() {
            return Err(Error::Shape(format!("control has {} channels, Q has {}", v.channels(), self.channels())));
        }
        if (v.horizon() - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(Error::TimeGridMismatch(format!(
                "control horizon {} differs from T = {}",
                v.horizon(),
                self.horizon
            )));
        }
        Ok(())
    }

    fn check_state(&self, s: &ModalState) -> Result<ModalState> {
        let n = self.truncation();
        if s.truncation() > n {
            return Err(Error::Shape(format!("state truncation {} exceeds N = {n}", s.truncation())));
        }
        Ok(s.resized(n))
    }
}

/// States on the uniform time grid `t_j = jT/steps`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<ModalState>,
    pub control: ControlSignal,
    pub warnings: Vec<String>,
    records: Option<Vec<Vec<StepRecord>>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &ModalState {
        self.snapshots.last().expect("trajectory has snapshots")
    }

    pub fn initial(&self) -> &ModalState {
        &self.snapshots[0]
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// Exact generator and input matrix of the stacked linear flow.
pub(crate) struct LinearModel {
    pub generator: DMatrix<f64>,
    pub input: DMatrix<f64>,
}

pub(crate) fn linear_model(params: &ProblemParams, coupled: bool) -> LinearModel {
    let n = params.truncation();
    let q = params.channels();
    let op = params.operator();
    let mut h = op.galerkin_matrix().clone();
    for k in 0..n {
        h[(k, k)] -= params.lambda();
    }
    let wg = if coupled {
        op.grid().multiplication_matrix(params.coupling().values())
    } else {
        DMatrix::zeros(n, n)
    };
    let mut l = DMatrix::zeros(2 * n, 2 * n);
    l.view_mut((0, n), (n, n)).copy_from(&h);
    l.view_mut((n, 0), (n, n)).copy_from(&(-(&h + &wg)));
    let mut b = DMatrix::zeros(2 * n, q);
    b.view_mut((n, 0), (n, q)).copy_from(&(-params.source_matrix()));
    LinearModel { generator: l, input: b }
}

/// Midpoint sample of a control on each time step.
fn step_control(v: &ControlSignal, dt: f64, step: usize) -> &[f64] {
    v.value_at((step as f64 + 0.5) * dt)
}

/// Solves `i∂ₜξ = A_Vξ − λξ + W·Re ξ + ⟨v(t),Q⟩φ` on `[0, T]`.
pub fn propagate_linear(xi0: &ModalState, v: &ControlSignal, params: &ProblemParams) -> Result<Trajectory> {
    let xi0 = params.check_state(xi0)?;
    params.check_control(v)?;
    let model = linear_model(params, true);
    let dt = params.dt();
    let (e, f) = exact_step(&model.generator, &model.input, dt);
    let mut x = DVector::from_vec(xi0.to_stacked());
    let mut snapshots = Vec::with_capacity(params.steps + 1);
    snapshots.push(xi0);
    for step in 0..params.steps {
        let u = DVector::from_column_slice(step_control(v, dt, step));
        x = &e * x + &f * u;
        snapshots.push(ModalState::from_stacked(x.as_slice()));
    }
    Ok(Trajectory {
        times: time_grid(params),
        snapshots,
        control: v.clone(),
        warnings: params.coupling_warning().into_iter().collect(),
        records: None,
    })
}

fn time_grid(params: &ProblemParams) -> Vec<f64> {
    let mut t: Vec<f64> = (0..=params.steps).map(|j| params.horizon * j as f64 / params.steps as f64).collect();
    t[params.steps] = params.horizon;
    t
}

/// Per-step data of the nonlinear scheme, kept for exact linearization.
#[derive(Clone, Debug)]
struct StepRecord {
    input: Vec<C64>,
    half: Vec<C64>,
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    dt: f64,
}

/// Precomputed grid quantities for the exponential midpoint scheme.
struct NlsScheme {
    n: usize,
    substeps: Vec<f64>,
    weight: f64,
    kappa: f64,
    p: u32,
    /// Interior sine table `(M−1) × N`.
    table: DMatrix<f64>,
    galerkin: DMatrix<f64>,
    /// Interior samples of `Q`, `(M−1) × q`.
    q_interior: DMatrix<f64>,
}

impl NlsScheme {
    fn new(params: &ProblemParams) -> Self {
        let m = params.grid_size();
        let q = params.channels();
        let q_interior = DMatrix::from_fn(m - 1, q, |x, c| params.fields()[c].values()[x + 1]);
        Self {
            n: params.truncation(),
            substeps: params.integrator.fractions().iter().map(|f| f * params.dt()).collect(),
            weight: 1.0 / m as f64,
            kappa: params.kappa,
            p: params.p,
            table: params.operator().grid().table().clone(),
            galerkin: params.operator().galerkin_matrix().clone(),
            q_interior,
        }
    }

    fn grid_values(&self, psi: &[C64]) -> (DVector<f64>, DVector<f64>) {
        let re = DVector::from_iterator(self.n, psi.iter().map(|c| c.re));
        let im = DVector::from_iterator(self.n, psi.iter().map(|c| c.im));
        (&self.table * re, &self.table * im)
    }

    fn density(&self, base: &DVector<f64>, psi: &[C64]) -> DVector<f64> {
        if self.kappa == 0.0 {
            return base.clone();
        }
        let (re, im) = self.grid_values(psi);
        let p = self.p as i32;
        DVector::from_fn(base.len(), |x, _| base[x] + self.kappa * (re[x] * re[x] + im[x] * im[x]).powi(p))
    }

    fn eigen(&self, rho: &DVector<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let mut weighted = self.table.clone();
        for (x, mut row) in weighted.row_iter_mut().enumerate() {
            row *= rho[x] * self.weight;
        }
        let h = &self.galerkin + self.table.transpose() * weighted;
        sorted_symmetric_eigen((&h + h.transpose()) * 0.5)
    }

    /// `P e^{−iΛτ} Pᵀ y`, evaluated as `y + P (e^{−iΛτ} − 1) Pᵀ y` so that
    /// roundoff from the dominant low modes is damped by `|λτ|`.
    fn half_flow(&self, values: &[f64], vectors: &DMatrix<f64>, y: &[C64], tau: f64) -> Vec<C64> {
        let re = DVector::from_iterator(self.n, y.iter().map(|c| c.re));
        let im = DVector::from_iterator(self.n, y.iter().map(|c| c.im));
        let (mut a, mut b) = (vectors.tr_mul(&re), vectors.tr_mul(&im));
        for k in 0..self.n {
            let theta = -values[k] * tau;
            let s = theta.sin();
            let cm1 = -2.0 * (0.5 * theta).sin().powi(2);
            let (x, z) = (a[k], b[k]);
            a[k] = cm1 * x - s * z;
            b[k] = s * x + cm1 * z;
        }
        let (a, b) = (vectors * a, vectors * b);
        (0..self.n).map(|k| y[k] + C64::new(a[k], b[k])).collect()
    }

    fn step(&self, psi: &[C64], u: &[f64]) -> Result<(Vec<C64>, Vec<StepRecord>)> {
        let base = &self.q_interior * DVector::from_column_slice(u);
        let mut state = psi.to_vec();
        let mut records = Vec::with_capacity(self.substeps.len());
        for &dt in &self.substeps {
            let (next, rec) = self.substep(&state, &base, dt)?;
            state = next;
            records.push(rec);
        }
        Ok((state, records))
    }

    fn substep(&self, psi: &[C64], base: &DVector<f64>, dt: f64) -> Result<(Vec<C64>, StepRecord)> {
        let tau = 0.5 * dt;
        let scale = psi.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt().max(1e-300);
        let mut half = psi.to_vec();
        let mut last_update = f64::INFINITY;
        let mut converged = false;
        let mut eig = self.eigen(&self.density(base, &half));
        for _ in 0..MAX_FIXED_POINT {
            let next = self.half_flow(&eig.0, &eig.1, psi, tau);
            let update = next.iter().zip(&half).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() / scale;
            half = next;
            if self.kappa == 0.0 || update < 1e-15 || (update < 1e-12 && update >= last_update) {
                converged = true;
                break;
            }
            last_update = update;
            eig = self.eigen(&self.density(base, &half));
        }
        if !converged {
            return Err(Error::NoConvergence { iterations: MAX_FIXED_POINT, update: last_update });
        }
        let next = self.half_flow(&eig.0, &eig.1, &half, tau);
        Ok((next, StepRecord { input: psi.to_vec(), half, values: eig.0, vectors: eig.1, dt }))
    }

    /// Grid map `δρ ↦ d/dρ [exp(−iτH(ρ))] y` as an `N × (M−1)` complex matrix.
    fn flow_derivative(&self, rec: &StepRecord, chi: &DMatrix<C64>, y: &[C64]) -> DMatrix<C64> {
        let n = self.n;
        let tau = 0.5 * rec.dt;
        let lam = &rec.values;
        let pc = rec.vectors.map(|v| C64::new(v, 0.0));
        let yv = DVector::from_column_slice(y);
        let yh = pc.tr_mul(&yv);
        let minus_itau = C64::new(0.0, -tau);
        let k = DMatrix::from_fn(n, n, |j, l| {
            let f = (minus_itau * lam[l]).exp();
            f * minus_itau * phi1(minus_itau * (lam[j] - lam[l])) * yh[l]
        });
        let z = chi * k.transpose();
        let w = self.weight;
        let dmat = DMatrix::from_fn(n, chi.nrows(), |j, x| chi[(x, j)] * z[(x, j)] * w);
        pc * dmat
    }

    /// Exact derivatives of one step: `δψₙ₊₁ = S δψₙ + B δu` in stacked form.
    fn tangent(&self, records: &[StepRecord]) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut iter = records.iter();
        let (mut s, mut b) = self.substep_tangent(iter.next().expect("a step has substeps"));
        for rec in iter {
            let (s2, b2) = self.substep_tangent(rec);
            b = &s2 * b + b2;
            s = s2 * s;
        }
        (s, b)
    }

    fn substep_tangent(&self, rec: &StepRecord) -> (DMatrix<f64>, DMatrix<f64>) {
        let psi = &rec.input;
        let n = self.n;
        let tau = 0.5 * rec.dt;
        let p = &rec.vectors;
        let chi = (&self.table * p).map(|v| C64::new(v, 0.0));
        let e_c = {
            let pc = p.map(|v| C64::new(v, 0.0));
            let ph = DMatrix::from_diagonal(&DVector::from_iterator(
                n,
                rec.values.iter().map(|l| C64::new(0.0, -l * tau).exp()),
            ));
            &pc * ph * pc.transpose()
        };
        let e_r = real_form(&e_c);
        let d_r = stack_rows(&self.flow_derivative(rec, &chi, psi));
        let d2_r = stack_rows(&self.flow_derivative(rec, &chi, &rec.half));
        let dq = &d_r * &self.q_interior;
        let d2q = &d2_r * &self.q_interior;
        if self.kappa == 0.0 {
            let b = d2q + &e_r * dq;
            return (e_r, b);
        }
        let (re, im) = self.grid_values(&rec.half);
        let pw = self.p as i32;
        let mut j = DMatrix::zeros(self.table.nrows(), 2 * n);
        for x in 0..self.table.nrows() {
            let amp2 = re[x] * re[x] + im[x] * im[x];
            let c = 2.0 * self.p as f64 * self.kappa * if pw == 1 { 1.0 } else { amp2.powi(pw - 1) };
            for k in 0..n {
                j[(x, k)] = c * re[x] * self.table[(x, k)];
                j[(x, n + k)] = c * im[x] * self.table[(x, k)];
            }
        }
        let lhs = DMatrix::identity(2 * n, 2 * n) - &d_r * &j;
        let lu = lhs.lu();
        let t1 = &e_r + &d2_r * &j;
        let x_e = lu.solve(&e_r).expect("implicit stage is a small perturbation of the identity");
        let x_q = lu.solve(&dq).expect("implicit stage is a small perturbation of the identity");
        (&t1 * x_e, &t1 * x_q + d2q)
    }
}

/// Solves `i∂ₜψ = A_Vψ + κ|ψ|^{2p}ψ + ⟨u(t),Q⟩ψ` on `[0, T]`.
pub fn propagate_nls(psi0: &ModalState, u: &ControlSignal, params: &ProblemParams) -> Result<Trajectory> {
    let psi0 = params.check_state(psi0)?;
    params.check_control(u)?;
    let norm = psi0.norm_l2();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::Invalid(format!("initial state has L2 norm {norm:.12}, expected 1")));
    }
    let scheme = NlsScheme::new(params);
    let dt = params.dt();
    let times = time_grid(params);
    let mut psi = psi0.into_coeffs();
    let mut snapshots = Vec::with_capacity(params.steps + 1);
    let mut records = Vec::with_capacity(params.steps);
    snapshots.push(ModalState::new(psi.clone()));
    for step in 0..params.steps {
        let (next, rec) = scheme.step(&psi, step_control(u, dt, step))?;
        psi = next;
        let state = ModalState::new(psi.clone());
        let h3 = state.sobolev_norm(3.0);
        if !(h3 <= params.h3_ceiling) {
            return Err(Error::LocalExistenceExceeded { time: times[step + 1], norm: h3, ceiling: params.h3_ceiling });
        }
        snapshots.push(state);
        records.push(rec);
    }
    Ok(Trajectory { times, snapshots, control: u.clone(), warnings: Vec::new(), records: Some(records) })
}

fn check_around<'a>(around: &'a Trajectory, params: &ProblemParams) -> Result<&'a [Vec<StepRecord>]> {
    let records = around
        .records
        .as_deref()
        .ok_or_else(|| Error::Invalid("trajectory was not produced by propagate_nls".into()))?;
    if records.len() != params.steps || (around.control.horizon() - params.horizon).abs() > 1e-12 * params.horizon {
        return Err(Error::TimeGridMismatch(format!(
            "trajectory has {} steps on [0, {}], params ask for {} on [0, {}]",
            records.len(),
            around.control.horizon(),
            params.steps,
            params.horizon
        )));
    }
    if around.snapshots[0].truncation() != params.truncation() {
        return Err(Error::Shape("trajectory truncation differs from params".into()));
    }
    Ok(records)
}

fn step_tangents(records: &[Vec<StepRecord>], params: &ProblemParams) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    let scheme = NlsScheme::new(params);
    records.par_iter().map(|rec| scheme.tangent(rec)).collect()
}

/// Terminal value `ξ(T)` of the linearization along `around` with `ξ(0) = 0`.
///
/// This is the exact derivative of the discrete flow map in the direction `v`.
pub fn linearize(around: &Trajectory, v: &ControlSignal, params: &ProblemParams) -> Result<ModalState> {
    let records = check_around(around, params)?;
    params.check_control(v)?;
    let tangents = step_tangents(records, params);
    let dt = params.dt();
    let mut x = DVector::zeros(2 * params.truncation());
    for (step, (s, b)) in tangents.iter().enumerate() {
        let dv = DVector::from_column_slice(step_control(v, dt, step));
        x = s * x + b * dv;
    }
    Ok(ModalState::from_stacked(x.as_slice()))
}

/// Jacobian of `u ↦ ψ(T)` with respect to piecewise-constant controls on
/// `bins` equal intervals, columns ordered bin-major like
/// [`ControlSignal::flatten`].
pub fn control_jacobian(around: &Trajectory, params: &ProblemParams, bins: usize) -> Result<DMatrix<f64>> {
    let records = check_around(around, params)?;
    if bins == 0 || !params.steps.is_multiple_of(bins) {
        return Err(Error::TimeGridMismatch(format!("{bins} bins do not divide {} steps", params.steps)));
    }
    let q = params.channels();
    let tangents = step_tangents(records, params);
    let per_bin = params.steps / bins;
    let dim = 2 * params.truncation();
    let mut jac = DMatrix::zeros(dim, q * bins);
    let mut phi = DMatrix::<f64>::identity(dim, dim);
    for (step, (s, b)) in tangents.iter().enumerate().rev() {
        let bin = step / per_bin;
        let mut cols = jac.columns_mut(bin * q, q);
        cols += &phi * b;
        phi = &phi * s;
    }
    Ok(jac)
}

/// `(ξ₁, ξ₂)` at `T` with `ξ₁` the `W`-free sourced solution and `ξ₂` the
/// response to `W·Re(ξ₁ + ξ₂)`, both from zero data.
pub fn split_xi(v: &ControlSignal, params: &ProblemParams) -> Result<(ModalState, ModalState)> {
    params.check_control(v)?;
    let n = params.truncation();
    let free = linear_model(params, false);
    let coupled = linear_model(params, true);
    // ξ₂ generator: the free part plus −W acting on Re ξ₁ and Re ξ₂
    let w_block = &coupled.generator - &free.generator;
    let d = 2 * n;
    let mut l = DMatrix::zeros(2 * d, 2 * d);
    l.view_mut((0, 0), (d, d)).copy_from(&free.generator);
    l.view_mut((d, 0), (d, d)).copy_from(&w_block);
    l.view_mut((d, d), (d, d)).copy_from(&coupled.generator);
    let mut b = DMatrix::zeros(2 * d, params.channels());
    b.view_mut((0, 0), (d, params.channels())).copy_from(&free.input);
    let dt = params.dt();
    let (e, f) = exact_step(&l, &b, dt);
    let mut x = DVector::zeros(2 * d);
    for step in 0..params.steps {
        x = &e * x + &f * DVector::from_column_slice(step_control(v, dt, step));
    }
    Ok((ModalState::from_stacked(&x.as_slice()[..d]), ModalState::from_stacked(&x.as_slice()[d..])))
}

/// Constant `û` with `⟨û, Q(x)⟩ = −κφ^{2p}(x) − λ` on the grid, of minimal
/// Euclidean norm.
pub fn stationary_control(params: &ProblemParams) -> Result<ControlSignal> {
    let m = params.grid_size();
    let q = params.channels();
    let ones = DVector::from_element(m + 1, 1.0);
    let power = DVector::from_column_slice(params.ground_power().values());
    if q == 0 {
        return Err(Error::SpanDeficient { residual: 1.0, component: "1".into() });
    }
    let a = DMatrix::from_fn(m + 1, q, |x, c| params.fields()[c].values()[x]);
    let svd = sorted_svd(&a);
    let rank = svd.rank(1e-12);
    let residual_of = |b: &DVector<f64>| {
        let x = svd.solve(b, rank, 0.0);
        (&a * x - b).amax()
    };
    let r1 = residual_of(&ones);
    if r1 > SPAN_TOL {
        return Err(Error::SpanDeficient { residual: r1, component: "1".into() });
    }
    if params.kappa != 0.0 {
        let rp = residual_of(&power) / power.amax().max(1e-300);
        if rp > SPAN_TOL {
            return Err(Error::SpanDeficient { residual: rp, component: format!("phi^{}", 2 * params.p) });
        }
    }
    let target = -(power * params.kappa) - ones * params.lambda();
    let u = svd.solve(&target, rank, 0.0);
    ControlSignal::constant(params.horizon, u.iter().copied().collect())
}

/// Slow cross-check of [`propagate_linear`]: Picard iteration on the Duhamel
/// formula with exponential-trapezoid quadrature in the eigenbasis of `A_V`.
pub fn duhamel_linear(xi0: &ModalState, v: &ControlSignal, params: &ProblemParams) -> Result<ModalState> {
    let xi0 = params.check_state(xi0)?;
    params.check_control(v)?;
    let n = params.truncation();
    let op = params.operator();
    let pm = op.eigenvector_matrix();
    let mu: Vec<f64> = op.eigenvalues().iter().map(|l| l - params.lambda()).collect();
    let wg = op.grid().multiplication_matrix(params.coupling().values());
    let s = params.source_matrix();
    let steps = params.steps;
    let dt = params.dt();
    let times = time_grid(params);
    let to_eigen = |c: &[C64]| -> Vec<C64> {
        (0..n).map(|k| (0..n).map(|j| c[j] * pm[(j, k)]).sum()).collect()
    };
    let from_eigen = |c: &[C64]| -> Vec<C64> {
        (0..n).map(|j| (0..n).map(|k| c[k] * pm[(j, k)]).sum()).collect()
    };
    let z: Vec<C64> = mu.iter().map(|m| C64::new(0.0, -m * dt)).collect();
    let prop: Vec<C64> = z.iter().map(|z| z.exp()).collect();
    let a0: Vec<C64> = z.iter().map(|&z| phi_ramp(z) * dt).collect();
    let a1: Vec<C64> = z.iter().map(|&z| (phi1(z) - phi_ramp(z)) * dt).collect();
    let x0 = to_eigen(xi0.coeffs());
    let sources: Vec<DVector<f64>> = times
        .iter()
        .map(|&t| &s * DVector::from_column_slice(v.value_at(t.min(v.horizon() * (1.0 - 1e-15)))))
        .collect();
    // initial guess: free phases
    let mut states: Vec<Vec<C64>> = times
        .iter()
        .map(|&t| from_eigen(&x0.iter().zip(&mu).map(|(c, m)| c * C64::new(0.0, -m * t).exp()).collect::<Vec<_>>()))
        .collect();
    let mut update = f64::INFINITY;
    for _ in 0..200 {
        let g: Vec<Vec<C64>> = states
            .iter()
            .zip(&sources)
            .map(|(xi, src)| {
                let re = DVector::from_iterator(n, xi.iter().map(|c| c.re));
                let gr = &wg * re + src;
                to_eigen(&gr.iter().map(|&v| C64::new(v, 0.0)).collect::<Vec<_>>())
            })
            .collect();
        let mut integral = vec![C64::new(0.0, 0.0); n];
        let mut next = Vec::with_capacity(steps + 1);
        next.push(from_eigen(&x0));
        for j in 1..=steps {
            for k in 0..n {
                integral[k] = prop[k] * integral[k] + a0[k] * g[j - 1][k] + a1[k] * g[j][k];
            }
            let t = times[j];
            let modal: Vec<C64> = (0..n)
                .map(|k| x0[k] * C64::new(0.0, -mu[k] * t).exp() - C64::new(0.0, 1.0) * integral[k])
                .collect();
            next.push(from_eigen(&modal));
        }
        update = next
            .iter()
            .zip(&states)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let scale = next.iter().map(|a| a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()).fold(1e-300, f64::max);
        states = next;
        if update <= 1e-14 * scale {
            return Ok(ModalState::new(states.pop().expect("nonempty")));
        }
    }
    Err(Error::NoConvergence { iterations: 200, update })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Builtin;
    use std::f64::consts::PI;

    #[test]
    fn control_signal_basics() {
        let u = ControlSignal::new(vec![0.0, 0.25, 1.0], vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(u.value_at(0.1), &[1.0, 2.0]);
        assert_eq!(u.value_at(0.25), &[3.0, 4.0]);
        assert_eq!(u.value_at(1.0), &[3.0, 4.0]);
        let want = (5.0 * 0.25 + 25.0 * 0.75f64).sqrt();
        assert!((u.l2_norm() - want).abs() < 1e-14);
        let r = u.reversed();
        assert_eq!(r.times(), &[0.0, 0.75, 1.0]);
        assert_eq!(r.value_at(0.1), &[3.0, 4.0]);
        let c = u.concat(&r).unwrap();
        assert_eq!(c.horizon(), 2.0);
        assert_eq!(c.value_at(1.9), &[1.0, 2.0]);
        assert!(ControlSignal::new(vec![0.0, 0.0], vec![vec![1.0]]).is_err());
        assert!(ControlSignal::new(vec![0.0, 1.0], vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn linear_zero_input_stays_zero() {
        let p = ProblemParams::standard(0.5, 8).unwrap().with_steps(64);
        let v = ControlSignal::zeros(1.0, 4, 1).unwrap();
        let tr = propagate_linear(&ModalState::zeros(8), &v, &p).unwrap();
        assert_eq!(tr.snapshots.len(), 65);
        assert!(tr.snapshots.iter().all(|s| s.norm_l2() == 0.0));
    }

    #[test]
    fn linear_eigenmode_phase_without_coupling() {
        let n = 8;
        let p = ProblemParams::standard(0.0, n).unwrap().with_steps(64);
        let v = ControlSignal::zeros(1.0, 4, 1).unwrap();
        let k = 3;
        let tr = propagate_linear(&ModalState::basis(k, n), &v, &p).unwrap();
        let phase = C64::new(0.0, -(laplacian(k) - PI * PI)).exp();
        let want = ModalState::basis(k, n).scale(phase);
        assert!((tr.terminal() - &want).norm_l2() < 1e-8);
    }

    fn laplacian(k: usize) -> f64 {
        crate::spectral::laplacian_eigenvalue(k)
    }

    #[test]
    fn nls_free_ground_state_phase() {
        let n = 8;
        let p = ProblemParams::standard(0.0, n).unwrap().with_steps(32);
        let u = ControlSignal::zeros(1.0, 4, 1).unwrap();
        let tr = propagate_nls(&ModalState::basis(1, n), &u, &p).unwrap();
        let want = ModalState::basis(1, n).scale(C64::new(0.0, -PI * PI).exp());
        assert!((tr.terminal() - &want).norm_l2() < 1e-8);
    }

    #[test]
    fn stationary_control_main_example() {
        let p = ProblemParams::standard(1.0, 8).unwrap();
        let u = stationary_control(&p).unwrap();
        let want = [-(1.0 + PI * PI), 0.0, 1.0, 0.0];
        for (a, b) in u.values()[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let free = ProblemParams::standard(0.0, 8).unwrap();
        let u0 = stationary_control(&free).unwrap();
        assert!((u0.values()[0][0] + PI * PI).abs() < 1e-10);
        assert!(u0.values()[0][1..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn stationary_control_needs_constant() {
        let m = 32;
        let p = ProblemParams::standard(1.0, 8)
            .unwrap()
            .with_fields(vec![Builtin::CosPi.sample(m), Builtin::XSq.sample(m)])
            .unwrap();
        match stationary_control(&p) {
            Err(Error::SpanDeficient { component, .. }) => assert_eq!(component, "1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nls_stationary_solution() {
        let n = 8;
        let p = ProblemParams::standard(1.0, n).unwrap().with_steps(64);
        let u = stationary_control(&p).unwrap();
        let tr = propagate_nls(&ModalState::basis(1, n), &u, &p).unwrap();
        for s in &tr.snapshots {
            assert!((s - &ModalState::basis(1, n)).norm_l2() < 1e-10);
        }
    }

    #[test]
    fn split_without_coupling_has_no_compact_part() {
        let p = ProblemParams::standard(0.0, 6).unwrap().with_steps(32);
        let v = ControlSignal::uniform(1.0, vec![vec![0.1, -0.2, 0.3, 0.05], vec![0.0, 0.1, 0.0, -0.1]]).unwrap();
        let (x1, x2) = split_xi(&v, &p).unwrap();
        assert!(x2.norm_l2() == 0.0);
        let full = propagate_linear(&ModalState::zeros(6), &v, &p).unwrap();
        assert!((full.terminal() - &x1).norm_l2() < 1e-12);
    }
}
