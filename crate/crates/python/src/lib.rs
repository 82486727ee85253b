//! Python bindings: Gaussian moments, process models, simulation, tilted
//! moments and the EP/ADF drivers. Vectors and matrices cross the boundary
//! as (nested) lists of floats.

use ctep::{
    builtin_lotka_volterra, builtin_ou, cle_from_mjp, euler_maruyama, gillespie, lotka_volterra, sample_observations,
    ContinuousLoss, DiscreteObsModel, EpConfig, EpResult, GaussianMoments, MjpSpec, Observation, QuarticTerm, SdeSpec,
    TimeGrid, Trajectory,
};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn err(e: ctep::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Gaussian in moment form.
#[pyclass(name = "Gaussian", module = "ctep_py", from_py_object)]
#[derive(Clone)]
pub struct PyGaussian {
    inner: GaussianMoments,
}

#[pymethods]
impl PyGaussian {
    #[new]
    fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = GaussianMoments::new(DVector::from_vec(mean), matrix(&cov)?).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.iter().copied().collect()
    }

    #[getter]
    fn cov(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.cov)
    }

    /// `(h, J)` with density proportional to `exp(hᵀx - ½ xᵀJx)`.
    fn natural(&self) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let c = self.inner.to_canonical().map_err(err)?;
        Ok((c.h.iter().copied().collect(), rows(&c.j)))
    }

    fn log_partition(&self) -> PyResult<f64> {
        self.inner.to_canonical().and_then(|c| c.log_partition()).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Gaussian(mean={:?}, cov={:?})", self.mean(), self.cov())
    }
}

/// A process model: a polynomial SDE, optionally backed by the reaction
/// network it approximates.
#[pyclass(name = "Model", module = "ctep_py")]
pub struct PyModel {
    sde: SdeSpec,
    mjp: Option<MjpSpec>,
}

#[pymethods]
impl PyModel {
    /// Predator-prey network; `rates = (k0, k1, k2, k3)`.
    #[staticmethod]
    #[pyo3(signature = (rates=None))]
    fn lotka_volterra(rates: Option<[f64; 4]>) -> Self {
        let mjp = rates.map_or_else(builtin_lotka_volterra, lotka_volterra);
        Self {
            sde: cle_from_mjp(&mjp),
            mjp: Some(mjp),
        }
    }

    /// `dx = A x dt + b^{1/2} dW`.
    #[staticmethod]
    fn ou(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            sde: builtin_ou(&matrix(&a)?, &matrix(&b)?).map_err(err)?,
            mjp: None,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.sde.dim()
    }

    #[getter]
    fn is_jump_process(&self) -> bool {
        self.mjp.is_some()
    }

    /// Simulates a path: exact SSA for reaction networks (`start` is rounded
    /// to counts), Euler-Maruyama on `n_steps` otherwise. Returns
    /// `(times, states)`; for jump processes `states[0]` is the initial state
    /// and `states[i + 1]` holds from `times[i]`.
    #[pyo3(signature = (start, t0, t1, seed, n_steps=2000))]
    fn simulate(
        &self,
        start: Vec<f64>,
        t0: f64,
        t1: f64,
        seed: u64,
        n_steps: usize,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        match &self.mjp {
            Some(m) => {
                let n0: Vec<i64> = start.iter().map(|x| x.round() as i64).collect();
                let tr = gillespie(m, &n0, t0, t1, seed).map_err(err)?;
                let states = tr
                    .states
                    .iter()
                    .map(|s| s.iter().map(|&c| c as f64).collect())
                    .collect();
                Ok((tr.times, states))
            }
            None => {
                let grid = TimeGrid::new(t0, t1, n_steps).map_err(err)?;
                let tr = euler_maruyama(&self.sde, &DVector::from_vec(start), &grid, seed).map_err(err)?;
                Ok((
                    tr.times.clone(),
                    tr.states.iter().map(|s| s.iter().copied().collect()).collect(),
                ))
            }
        }
    }

    /// Simulates a path and returns noisy observations `(times, values)` of it.
    #[pyo3(signature = (start, t0, t1, times, noise, seed, n_steps=2000))]
    #[allow(clippy::too_many_arguments)]
    fn simulate_observations(
        &self,
        start: Vec<f64>,
        t0: f64,
        t1: f64,
        times: Vec<f64>,
        noise: &PyObsModel,
        seed: u64,
        n_steps: usize,
    ) -> PyResult<Vec<Vec<f64>>> {
        let obs = match &self.mjp {
            Some(m) => {
                let n0: Vec<i64> = start.iter().map(|x| x.round() as i64).collect();
                let tr = gillespie(m, &n0, t0, t1, seed).map_err(err)?;
                sample_observations(&tr as &dyn Trajectory, &times, &noise.inner, ctep::derive_seed(seed, 0))
            }
            None => {
                let grid = TimeGrid::new(t0, t1, n_steps).map_err(err)?;
                let tr = euler_maruyama(&self.sde, &DVector::from_vec(start), &grid, seed).map_err(err)?;
                sample_observations(&tr, &times, &noise.inner, ctep::derive_seed(seed, 0))
            }
        }
        .map_err(err)?;
        Ok(obs.iter().map(|o| o.value.iter().copied().collect()).collect())
    }
}

/// Observation noise model.
#[pyclass(name = "ObsModel", module = "ctep_py")]
pub struct PyObsModel {
    inner: DiscreteObsModel,
}

#[pymethods]
impl PyObsModel {
    /// Log-normal noise with mean `x` and variance `variance` per component.
    #[staticmethod]
    fn log_normal(variance: f64) -> PyResult<Self> {
        Ok(Self {
            inner: DiscreteObsModel::log_normal(variance).map_err(err)?,
        })
    }

    /// `y = x + N(0, r)`.
    #[staticmethod]
    fn gaussian(r: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: DiscreteObsModel::gaussian(matrix(&r)?).map_err(err)?,
        })
    }

    /// Moments and log normaliser of `cavity(x) p(y | x)`.
    fn tilted_moments(&self, y: Vec<f64>, cavity: &PyGaussian) -> PyResult<(f64, PyGaussian)> {
        let c = cavity.inner.to_canonical().map_err(err)?;
        let t = ctep::tilted_moments(&self.inner, &Observation::new(0.0, DVector::from_vec(y)), &c).map_err(err)?;
        Ok((
            t.log_partition - c.log_partition().map_err(err)?,
            PyGaussian { inner: t.moments },
        ))
    }
}

/// Posterior marginals on the time grid and run diagnostics.
#[pyclass(name = "Posterior", module = "ctep_py", get_all)]
pub struct PyPosterior {
    times: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<Vec<f64>>>,
    converged: bool,
    sweeps: usize,
    log_evidence: f64,
    max_site_delta_history: Vec<f64>,
}

impl PyPosterior {
    fn new(grid: &TimeGrid, r: EpResult) -> Self {
        Self {
            times: grid.times(),
            means: r
                .smoothed
                .nodes
                .iter()
                .map(|m| m.mean.iter().copied().collect())
                .collect(),
            covs: r.smoothed.nodes.iter().map(|m| rows(&m.cov)).collect(),
            converged: r.converged,
            sweeps: r.sweeps_run,
            log_evidence: r.log_evidence,
            max_site_delta_history: r.max_site_delta_history,
        }
    }
}

#[pymethods]
impl PyPosterior {
    fn __len__(&self) -> usize {
        self.times.len()
    }
}

/// `(dim, a, b, t_start, t_end)`.
type QuarticSpec = (usize, f64, f64, f64, f64);

struct Problem {
    obs: Vec<Observation>,
    loss: ContinuousLoss,
    grid: TimeGrid,
}

fn problem(
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    t0: f64,
    t1: f64,
    n_steps: usize,
    quartic: Option<Vec<QuarticSpec>>,
) -> PyResult<Problem> {
    if times.len() != values.len() {
        return Err(PyValueError::new_err("times and values differ in length"));
    }
    let obs = times
        .into_iter()
        .zip(values)
        .map(|(t, v)| Observation::new(t, DVector::from_vec(v)))
        .collect();
    let loss = match quartic {
        None => ContinuousLoss::None,
        Some(terms) => ContinuousLoss::Quartic(
            terms
                .into_iter()
                .map(|(dim, a, b, w0, w1)| QuarticTerm {
                    dim,
                    a,
                    b,
                    window: (w0, w1),
                })
                .collect(),
        ),
    };
    Ok(Problem {
        obs,
        loss,
        grid: TimeGrid::new(t0, t1, n_steps).map_err(err)?,
    })
}

/// Runs damped EP. `quartic` is a list of `(dim, a, b, t_start, t_end)`
/// penalties `a (x_dim - b)⁴` active on their windows.
#[pyfunction]
#[pyo3(signature = (model, times, values, noise, init, t0, t1, n_steps=2000, damping=0.5, tolerance=0.01, max_sweeps=50, quartic=None))]
#[allow(clippy::too_many_arguments)]
fn run_ep(
    py: Python<'_>,
    model: &PyModel,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    noise: &PyObsModel,
    init: &PyGaussian,
    t0: f64,
    t1: f64,
    n_steps: usize,
    damping: f64,
    tolerance: f64,
    max_sweeps: usize,
    quartic: Option<Vec<QuarticSpec>>,
) -> PyResult<PyPosterior> {
    let p = problem(times, values, t0, t1, n_steps, quartic)?;
    let cfg = EpConfig {
        damping,
        tolerance,
        max_sweeps,
        ..EpConfig::default()
    };
    let r = py
        .detach(|| ctep::run_ep(&model.sde, &p.obs, &noise.inner, &p.loss, &init.inner, &p.grid, &cfg))
        .map_err(err)?;
    Ok(PyPosterior::new(&p.grid, r))
}

/// Single-pass assumed density filtering; `smoothing` appends one backward pass.
#[pyfunction]
#[pyo3(signature = (model, times, values, noise, init, t0, t1, n_steps=2000, smoothing=true, quartic=None))]
#[allow(clippy::too_many_arguments)]
fn run_adf(
    py: Python<'_>,
    model: &PyModel,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    noise: &PyObsModel,
    init: &PyGaussian,
    t0: f64,
    t1: f64,
    n_steps: usize,
    smoothing: bool,
    quartic: Option<Vec<QuarticSpec>>,
) -> PyResult<PyPosterior> {
    let p = problem(times, values, t0, t1, n_steps, quartic)?;
    let r = py
        .detach(|| {
            ctep::run_adf(
                &model.sde,
                &p.obs,
                &noise.inner,
                &p.loss,
                &init.inner,
                &p.grid,
                smoothing,
            )
        })
        .map_err(err)?;
    Ok(PyPosterior::new(&p.grid, r))
}

#[pymodule]
fn ctep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussian>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyObsModel>()?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(run_ep, m)?)?;
    m.add_function(wrap_pyfunction!(run_adf, m)?)?;
    m.add("RNG_ALGORITHM", ctep::RNG_ALGORITHM)?;
    Ok(())
}
