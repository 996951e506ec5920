//! Python bindings for `nlsctrl`.
//!
//! States cross the boundary as lists of complex modal coefficients, controls
//! as `(times, values)` pairs and fields as grid samples on `x_j = j/(4N)`.

use nlsctrl::dynamics::{self, ControlSignal, Integrator};
use nlsctrl::error::Error;
use nlsctrl::fields::Builtin;
use nlsctrl::saturation;
use nlsctrl::spectral::{self, ModalState, SampledField, C64};
use nlsctrl::steering::{self, SteerOptions};
use nlsctrl::synthesis;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Parse(_) | Error::Invalid(_) | Error::Shape(_) | Error::Aliasing { .. } | Error::DirichletViolation { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn field(spec: &str, m: usize) -> PyResult<SampledField> {
    spec.parse::<Builtin>().map(|b| b.sample(m)).map_err(py_err)
}

fn state(c: Vec<C64>) -> ModalState {
    ModalState::new(c)
}

fn control(times: Vec<f64>, values: Vec<Vec<f64>>) -> PyResult<ControlSignal> {
    ControlSignal::new(times, values).map_err(py_err)
}

type PyControl = (Vec<f64>, Vec<Vec<f64>>);

fn to_py(u: &ControlSignal) -> PyControl {
    (u.times().to_vec(), u.values().to_vec())
}

/// Problem data: potential, control fields, coupling strength and discretization.
#[pyclass(name = "Problem", module = "nlsctrl_py")]
#[derive(Clone)]
pub struct PyProblem {
    inner: dynamics::ProblemParams,
}

#[pymethods]
impl PyProblem {
    /// Built-in field names (`zero`, `one`, `x`, `x_sq`, `cos_pi`, `cos_2pi`,
    /// `phi1_sq`) or explicit sample lists of length `4N + 1`.
    #[new]
    #[pyo3(signature = (kappa=0.5, modes=16, potential=None, fields=None, p=1, horizon=1.0, steps=2048, integrator="suzuki"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kappa: f64,
        modes: usize,
        potential: Option<Bound<'_, PyAny>>,
        fields: Option<Vec<Bound<'_, PyAny>>>,
        p: u32,
        horizon: f64,
        steps: usize,
        integrator: &str,
    ) -> PyResult<Self> {
        let m = spectral::GRID_FACTOR * modes;
        let sample = |obj: &Bound<'_, PyAny>| -> PyResult<SampledField> {
            if let Ok(name) = obj.extract::<String>() {
                field(&name, m)
            } else {
                SampledField::new(obj.extract::<Vec<f64>>()?).map_err(py_err)
            }
        };
        let v = match &potential {
            Some(obj) => sample(obj)?,
            None => SampledField::zeros(m),
        };
        let q = match &fields {
            Some(list) => list.iter().map(sample).collect::<PyResult<Vec<_>>>()?,
            None => nlsctrl::fields::standard_fields(m),
        };
        let integrator = match integrator {
            "midpoint" => Integrator::Midpoint,
            "triple_jump" => Integrator::TripleJump,
            "suzuki" => Integrator::Suzuki,
            "kahan_li" => Integrator::KahanLi,
            other => return Err(PyValueError::new_err(format!("unknown integrator '{other}'"))),
        };
        let inner = dynamics::ProblemParams::new(v, q, kappa, p, horizon, modes)
            .map_err(py_err)?
            .with_steps(steps)
            .with_integrator(integrator);
        Ok(Self { inner })
    }

    #[getter]
    fn modes(&self) -> usize {
        self.inner.truncation()
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    /// Ground state `φ` as modal coefficients.
    fn ground_state(&self) -> Vec<C64> {
        self.inner.phi().into_coeffs()
    }

    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.operator().eigenvalues().to_vec()
    }

    /// Constant control holding `φ` fixed.
    fn stationary_control(&self) -> PyResult<PyControl> {
        dynamics::stationary_control(&self.inner).map(|u| to_py(&u)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(kappa={}, modes={}, channels={}, steps={})",
            self.inner.kappa,
            self.inner.truncation(),
            self.inner.channels(),
            self.inner.steps
        )
    }
}

/// Terminal state of the nonlinear flow.
#[pyfunction]
fn propagate_nls(problem: &PyProblem, psi0: Vec<C64>, times: Vec<f64>, values: Vec<Vec<f64>>) -> PyResult<Vec<C64>> {
    let u = control(times, values)?;
    let traj = dynamics::propagate_nls(&state(psi0), &u, &problem.inner).map_err(py_err)?;
    Ok(traj.terminal().coeffs().to_vec())
}

/// Terminal state of the linearized flow around `(φ, û)`.
#[pyfunction]
fn propagate_linear(problem: &PyProblem, xi0: Vec<C64>, times: Vec<f64>, values: Vec<Vec<f64>>) -> PyResult<Vec<C64>> {
    let v = control(times, values)?;
    let traj = dynamics::propagate_linear(&state(xi0), &v, &problem.inner).map_err(py_err)?;
    Ok(traj.terminal().coeffs().to_vec())
}

#[pyfunction]
fn sobolev_norm(coeffs: Vec<C64>, s: f64) -> f64 {
    state(coeffs).sobolev_norm(s)
}

/// `(c_est, argmin, passed)` for `k³|⟨μφ, φ_k⟩| ≥ c` over `k ≤ k_max`.
#[pyfunction]
#[pyo3(signature = (problem, mu, k_max=8, tol=1e-12))]
fn mu_bound(problem: &PyProblem, mu: &str, k_max: usize, tol: f64) -> PyResult<(f64, usize, bool)> {
    let f = field(mu, problem.inner.grid_size())?;
    let r = spectral::verify_mu_bound(&f, problem.inner.operator(), k_max, tol).map_err(py_err)?;
    Ok((r.c_est, r.argmin, r.verdict.is_pass()))
}

/// Ladder ranks and the saturation verdict.
#[pyfunction]
#[pyo3(signature = (problem, levels=40, tol=1e-8))]
fn saturation_test<'py>(py: Python<'py>, problem: &PyProblem, levels: usize, tol: f64) -> PyResult<Bound<'py, PyDict>> {
    let ladder = saturation::build_ladder(&problem.inner, levels, tol);
    let v = saturation::saturation_verdict(&ladder, &problem.inner, tol);
    let d = PyDict::new(py);
    d.set_item("ranks", ladder.ranks.clone())?;
    d.set_item("saturating", v.saturating)?;
    d.set_item("codim", v.codim)?;
    d.set_item("tangent_rank", v.tangent_rank)?;
    d.set_item("missed", v.missed.map(|m| m.into_coeffs()))?;
    Ok(d)
}

/// Zero crossings `(k, κ*)` of the first `k_max` eigenvalues of `A_κ`.
#[pyfunction]
#[pyo3(signature = (k_max=3, lo=-30.0, hi=0.0, samples=301, modes=16))]
fn kappa_crossings(k_max: usize, lo: f64, hi: f64, samples: usize, modes: usize) -> PyResult<Vec<(usize, f64)>> {
    let sw = saturation::kappa_sweep(k_max, lo, hi, samples, modes).map_err(py_err)?;
    Ok(sw.crossings.iter().map(|c| (c.k, c.kappa_star)).collect())
}

/// Random tangent vector at `φ` with `H³` norm `h3_norm` supported on `modes` modes.
#[pyfunction]
#[pyo3(signature = (problem, h3_norm, modes=None, seed=0))]
fn random_tangent(problem: &PyProblem, h3_norm: f64, modes: Option<usize>, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = modes.unwrap_or(problem.inner.truncation());
    synthesis::random_tangent(&mut rng, &problem.inner.phi(), k, h3_norm).into_coeffs()
}

/// Random unit state within `radius` of `φ` in `H³`.
#[pyfunction]
#[pyo3(signature = (problem, radius, seed=0))]
fn random_near_ground(problem: &PyProblem, radius: f64, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    steering::random_near_ground(&mut rng, &problem.inner.phi(), radius).into_coeffs()
}

/// Control of the linearized flow onto `target`; returns `(control, residual)`.
#[pyfunction]
#[pyo3(signature = (problem, target, bins=64, tol=1e-6))]
fn linearized_control(problem: &PyProblem, target: Vec<C64>, bins: usize, tol: f64) -> PyResult<(PyControl, f64)> {
    let sol = synthesis::solve_linearized_control(&state(target), &problem.inner, bins, None, tol).map_err(py_err)?;
    Ok((to_py(&sol.control), sol.report.residual))
}

/// Newton steering `ψ₀ → ψ₁`; returns a dict with the verdict, history and control.
#[pyfunction]
#[pyo3(signature = (problem, psi0, psi1, tol=1e-8, max_iter=8, bins=128, two_leg=false))]
#[allow(clippy::too_many_arguments)]
fn steer<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    psi0: Vec<C64>,
    psi1: Vec<C64>,
    tol: f64,
    max_iter: usize,
    bins: usize,
    two_leg: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = SteerOptions { tol, max_iter, bins, ..SteerOptions::default() };
    let (a, b) = (state(psi0), state(psi1));
    let d = PyDict::new(py);
    if two_leg {
        let rep = py.allow_threads(|| steering::two_leg_steer(&a, &b, &problem.inner, &opts)).map_err(py_err)?;
        d.set_item("verdict", rep.verdict.label())?;
        d.set_item("residual", rep.end_to_end)?;
        d.set_item("control", to_py(&rep.control))?;
        d.set_item("failed_leg", rep.failed_leg)?;
    } else {
        let rep = py.allow_threads(|| steering::newton_steer(&a, &b, &problem.inner, &opts)).map_err(py_err)?;
        d.set_item("verdict", rep.verdict.label())?;
        d.set_item("residual", rep.residual())?;
        d.set_item("iterations", rep.iterations)?;
        d.set_item("residual_history", rep.residual_history.clone())?;
        d.set_item("control", to_py(&rep.final_control))?;
    }
    Ok(d)
}

/// Finite-difference remainders and their slope for the derivative in direction `v`.
#[pyfunction]
fn gradient_check(
    problem: &PyProblem,
    psi0: Vec<C64>,
    u_hat: PyControl,
    v: PyControl,
    eps: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<f64>, Option<f64>)> {
    let u = control(u_hat.0, u_hat.1)?;
    let v = control(v.0, v.1)?;
    let g = steering::gradient_check(&state(psi0), &u, &v, &eps, &problem.inner).map_err(py_err)?;
    Ok((g.eps, g.remainders, g.slope))
}

#[pymodule]
fn nlsctrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(propagate_nls, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_linear, m)?)?;
    m.add_function(wrap_pyfunction!(sobolev_norm, m)?)?;
    m.add_function(wrap_pyfunction!(mu_bound, m)?)?;
    m.add_function(wrap_pyfunction!(saturation_test, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_crossings, m)?)?;
    m.add_function(wrap_pyfunction!(random_tangent, m)?)?;
    m.add_function(wrap_pyfunction!(random_near_ground, m)?)?;
    m.add_function(wrap_pyfunction!(linearized_control, m)?)?;
    m.add_function(wrap_pyfunction!(steer, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}
