//! Python bindings for `torus_sync`.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde::Serialize;
use serde_json::Value;

use torus_sync::criterion::{self, M_FULL_CIRCLE};
use torus_sync::dynamics::{self, IntegratorKind, NormalizerSpec, ParticleState, SimConfig, WeightSpec};
use torus_sync::experiments;
use torus_sync::stability::{self, ClassifyTolerances};
use torus_sync::{InteractionKernel, L1Method, SyncError};

fn to_py_err(e: SyncError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn value_to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_py_any(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_py_any(py),
        },
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(value_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, value_to_py(py, item)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    value_to_py(py, &v)
}

fn state(angles: Vec<f64>) -> PyResult<ParticleState> {
    ParticleState::new(angles).map_err(to_py_err)
}

fn weights(n: usize, c: Option<Vec<f64>>, w1: Option<Vec<f64>>) -> PyResult<WeightSpec> {
    let w = WeightSpec { c: c.unwrap_or_else(|| vec![1.0; n]), w1 };
    w.validate(n).map_err(to_py_err)?;
    Ok(w)
}

fn normalizer(normalized: bool) -> NormalizerSpec {
    if normalized {
        NormalizerSpec::Attention
    } else {
        NormalizerSpec::None
    }
}

/// An interaction kernel `f`.
#[pyclass(name = "Kernel", module = "torus_sync_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKernel {
    inner: InteractionKernel,
}

#[pymethods]
impl PyKernel {
    /// Parses `sa:<beta>`, `kuramoto` or `asym:<a>:<b>:<inner>`.
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        let inner = spec.parse::<InteractionKernel>().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyKernel { inner })
    }

    #[staticmethod]
    fn self_attention(beta: f64) -> Self {
        PyKernel { inner: InteractionKernel::self_attention(beta) }
    }

    #[staticmethod]
    fn kuramoto() -> Self {
        PyKernel { inner: InteractionKernel::kuramoto() }
    }

    #[staticmethod]
    fn asymmetric(base: &PyKernel, a: f64, b: f64) -> PyResult<Self> {
        Ok(PyKernel { inner: InteractionKernel::asymmetric_combine(&base.inner, a, b).map_err(to_py_err)? })
    }

    #[getter]
    fn spec(&self) -> String {
        self.inner.spec_string()
    }

    #[getter]
    fn beta(&self) -> Option<f64> {
        self.inner.beta()
    }

    #[getter]
    fn fp0(&self) -> f64 {
        self.inner.fp0()
    }

    #[pyo3(signature = (x, order = 0))]
    fn eval(&self, x: f64, order: usize) -> PyResult<f64> {
        if order > 3 {
            return Err(PyValueError::new_err("order must be 0..=3"));
        }
        Ok(self.inner.eval(x, order))
    }

    fn tau(&self) -> PyResult<f64> {
        self.inner.tau().map_err(to_py_err)
    }

    /// Intervals `(lo, hi)` where `f''' > 0`.
    fn positive_region(&self) -> PyResult<Vec<(f64, f64)>> {
        let r = self.inner.f3_positive_region().map_err(to_py_err)?;
        Ok(r.intervals.iter().map(|iv| (iv.lo, iv.hi)).collect())
    }

    /// `∫|f'''|₊` over one period; `method` is `region` or `quadrature`.
    #[pyo3(signature = (method = "region"))]
    fn l1_f3_plus(&self, method: &str) -> PyResult<f64> {
        let m = match method {
            "region" => L1Method::RegionAntiderivative,
            "quadrature" => L1Method::Quadrature,
            other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
        };
        self.inner.l1_f3_plus(m).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!("Kernel('{}')", self.inner.spec_string())
    }
}

#[pyfunction]
#[pyo3(signature = (kernel, m = M_FULL_CIRCLE))]
fn check_criterion(py: Python<'_>, kernel: &PyKernel, m: f64) -> PyResult<Py<PyAny>> {
    to_py(py, &criterion::check_criterion(&kernel.inner, m).map_err(to_py_err)?)
}

/// Ratios for the self-attention kernel; failed grid points give `None`.
#[pyfunction]
#[pyo3(signature = (betas, m = M_FULL_CIRCLE))]
fn ratio_sweep(betas: Vec<f64>, m: f64) -> PyResult<Vec<Option<f64>>> {
    let rows = criterion::ratio_sweep(&betas, m).map_err(to_py_err)?;
    Ok(rows.into_iter().map(|r| r.report.ok().map(|rep| rep.ratio)).collect())
}

#[pyfunction]
fn find_criterion_boundary(m: f64, lo: f64, hi: f64) -> PyResult<f64> {
    criterion::find_criterion_boundary(m, (lo, hi)).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (angles, kernel, c = None, w1 = None, normalized = false))]
fn vector_field(
    angles: Vec<f64>,
    kernel: &PyKernel,
    c: Option<Vec<f64>>,
    w1: Option<Vec<f64>>,
    normalized: bool,
) -> PyResult<Vec<f64>> {
    let st = state(angles)?;
    let w = weights(st.n(), c, w1)?;
    dynamics::vector_field(&st, &kernel.inner, &w, normalizer(normalized)).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (angles, kernel, c = None))]
fn energy(angles: Vec<f64>, kernel: &PyKernel, c: Option<Vec<f64>>) -> PyResult<f64> {
    let st = state(angles)?;
    let w = weights(st.n(), c, None)?;
    dynamics::energy(&st, &kernel.inner, &w).map_err(to_py_err)
}

/// Integrates the dynamics; returns a dict of sampled times, states,
/// energies, diameters and the terminal status.
#[pyfunction]
#[pyo3(signature = (
    angles, kernel, c = None, w1 = None, normalized = false, t_max = 1e4, sample_every = 1.0,
    integrator = "rk45", dt = 1e-2, rtol = 1e-9, atol = 1e-11, sync_tol = 1e-6
))]
#[allow(clippy::too_many_arguments)]
fn integrate(
    py: Python<'_>,
    angles: Vec<f64>,
    kernel: &PyKernel,
    c: Option<Vec<f64>>,
    w1: Option<Vec<f64>>,
    normalized: bool,
    t_max: f64,
    sample_every: f64,
    integrator: &str,
    dt: f64,
    rtol: f64,
    atol: f64,
    sync_tol: f64,
) -> PyResult<Py<PyAny>> {
    let st = state(angles)?;
    let w = weights(st.n(), c, w1)?;
    let integrator = match integrator {
        "rk45" => IntegratorKind::Rk45Adaptive { dt_init: 1e-3, rtol, atol },
        "rk4" => IntegratorKind::Rk4Fixed { dt },
        other => return Err(PyValueError::new_err(format!("unknown integrator {other:?}"))),
    };
    let cfg = SimConfig { integrator, t_max, sample_every, sync_tol, seed: 0 };
    let tr = dynamics::integrate(&st, &kernel.inner, &w, normalizer(normalized), &cfg).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("times", &tr.times)?;
    dict.set_item("states", tr.states.iter().map(|s| s.angles().to_vec()).collect::<Vec<_>>())?;
    dict.set_item("energies", &tr.energies)?;
    dict.set_item("diameters", &tr.diameters)?;
    dict.set_item("terminal_status", tr.terminal_status.as_str())?;
    dict.set_item("steps", tr.steps)?;
    dict.into_py_any(py)
}

#[pyfunction]
fn circular_diameter(angles: Vec<f64>) -> PyResult<f64> {
    Ok(dynamics::circular_diameter(&state(angles)?))
}

#[pyfunction]
fn cluster_count(angles: Vec<f64>, gap_threshold: f64) -> PyResult<usize> {
    Ok(dynamics::cluster_count(&state(angles)?, gap_threshold))
}

#[pyfunction]
#[pyo3(signature = (angles, kernel, c = None))]
fn stationarity_residual(angles: Vec<f64>, kernel: &PyKernel, c: Option<Vec<f64>>) -> PyResult<f64> {
    let st = state(angles)?;
    let w = weights(st.n(), c, None)?;
    stability::stationarity_residual(&st, &kernel.inner, &w).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (angles, kernel, c = None))]
fn hessian_spectrum(angles: Vec<f64>, kernel: &PyKernel, c: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let st = state(angles)?;
    let w = weights(st.n(), c, None)?;
    stability::hessian_spectrum(&st, &kernel.inner, &w).map_err(to_py_err)
}

/// Full stationary-point report as a dict.
#[pyfunction]
#[pyo3(signature = (angles, kernel, c = None, w1 = None, normalized = false, merge_tol = 1e-8, instability_tol = 1e-9, residual_tol = 1e-10))]
#[allow(clippy::too_many_arguments)]
fn classify(
    py: Python<'_>,
    angles: Vec<f64>,
    kernel: &PyKernel,
    c: Option<Vec<f64>>,
    w1: Option<Vec<f64>>,
    normalized: bool,
    merge_tol: f64,
    instability_tol: f64,
    residual_tol: f64,
) -> PyResult<Py<PyAny>> {
    let st = state(angles)?;
    let w = weights(st.n(), c, w1)?;
    let tol = ClassifyTolerances { merge_tol, instability_tol, residual_tol };
    let report = stability::classify_stationary_point(&st, &kernel.inner, &w, normalizer(normalized), &tol).map_err(to_py_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn build_counterexample(beta: f64, n: usize) -> PyResult<Vec<f64>> {
    Ok(experiments::build_counterexample(beta, n).map_err(to_py_err)?.into_angles())
}

/// Monte-Carlo study for the self-attention kernel, as a dict with
/// `columns`, `rows` and `pass`.
#[pyfunction]
#[pyo3(signature = (beta, n, trials, normalized = false, seed = 0, t_max = 1e6, sample_every = 100.0))]
#[allow(clippy::too_many_arguments)]
fn monte_carlo_sync(
    py: Python<'_>,
    beta: f64,
    n: usize,
    trials: usize,
    normalized: bool,
    seed: u64,
    t_max: f64,
    sample_every: f64,
) -> PyResult<Py<PyAny>> {
    let cfg = SimConfig { t_max, sample_every, seed, ..SimConfig::default() };
    let r = experiments::monte_carlo_sync(beta, n, trials, normalizer(normalized), &cfg).map_err(to_py_err)?;
    to_py(py, &r)
}

#[pymodule]
fn torus_sync_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_function(wrap_pyfunction!(check_criterion, m)?)?;
    m.add_function(wrap_pyfunction!(ratio_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(find_criterion_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(vector_field, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(circular_diameter, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_count, m)?)?;
    m.add_function(wrap_pyfunction!(stationarity_residual, m)?)?;
    m.add_function(wrap_pyfunction!(hessian_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(build_counterexample, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_sync, m)?)?;
    Ok(())
}
