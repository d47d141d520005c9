//! Python bindings. Reports that are plain data (fit results, transition
//! rows) cross the boundary as JSON and are decoded with the `json` module.

use std::path::PathBuf;

use pyo3::exceptions::{PyMemoryError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use nvgslac::carbon13::{default_families, load_families, mc_average_spectrum, McConfig};
use nvgslac::fitting::{self, FitBounds, FitOptions, FitParams};
use nvgslac::hamiltonian::{self, FieldConfig, MixedPairConvention};
use nvgslac::spectrum::{self, MeasuredSpectrum};
use nvgslac::spin_core::eigensolve;
use nvgslac::transitions::{transition_sweep, IntensityOptions, SpinTemperature, TransitionMode, TransitionTable};
use nvgslac::{Error, PhysicalConstants};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Resource(_) => PyMemoryError::new_err(e.to_string()),
        Error::NonConvergence { .. } | Error::Internal(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_json<'py>(py: Python<'py>, text: String) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json(value: impl serde::Serialize) -> String {
    serde_json::to_string(&value).expect("plain data serialises")
}

/// Physical constants in MHz and MHz/mT.
#[pyclass(name = "Constants", from_py_object)]
#[derive(Clone, Default)]
struct PyConstants {
    inner: PhysicalConstants,
}

#[pymethods]
impl PyConstants {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    /// Defaults with a `key = value` override file applied.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        PhysicalConstants::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    /// A copy with `key = value` overrides applied.
    fn with_overrides(&self, text: &str) -> PyResult<Self> {
        self.inner
            .with_overrides(text, std::path::Path::new("<string>"))
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn d_g(&self) -> f64 {
        self.inner.d_g
    }
    #[getter]
    fn gamma_e(&self) -> f64 {
        self.inner.gamma_e
    }
    #[getter]
    fn q(&self) -> f64 {
        self.inner.q
    }
    #[getter]
    fn gamma_n14(&self) -> f64 {
        self.inner.gamma_n14
    }
    #[getter]
    fn gamma_c13(&self) -> f64 {
        self.inner.gamma_c13
    }
    #[getter]
    fn a_par(&self) -> f64 {
        self.inner.a_par
    }
    #[getter]
    fn a_perp(&self) -> f64 {
        self.inner.a_perp
    }

    fn __repr__(&self) -> String {
        format!(
            "Constants(d_g={}, gamma_e={}, q={}, a_par={}, a_perp={})",
            self.inner.d_g, self.inner.gamma_e, self.inner.q, self.inner.a_par, self.inner.a_perp
        )
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }
}

fn consts(c: Option<PyConstants>) -> PhysicalConstants {
    c.map(|c| c.inner).unwrap_or_default()
}

fn mode(s: &str) -> PyResult<TransitionMode> {
    s.parse().map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (constants=None))]
fn gslac_field(constants: Option<PyConstants>) -> f64 {
    hamiltonian::gslac_field(&consts(constants))
}

/// Closed-form E1..E9 (MHz); `convention` is "minus_q" (default) or "plus_q".
#[pyfunction]
#[pyo3(signature = (b_mt, convention="minus_q", constants=None))]
fn analytic_energies(b_mt: f64, convention: &str, constants: Option<PyConstants>) -> PyResult<Vec<f64>> {
    let conv = match convention {
        "minus_q" => MixedPairConvention::MinusQ,
        "plus_q" => MixedPairConvention::PlusQ,
        other => return Err(PyValueError::new_err(format!("unknown convention '{other}'"))),
    };
    Ok(hamiltonian::analytic_energies(&consts(constants), b_mt, conv).to_vec())
}

/// Eigenvalues of the 9x9 Hamiltonian, ascending, with their nominal labels.
#[pyfunction]
#[pyo3(signature = (b_mt, theta_deg=0.0, constants=None))]
fn levels(b_mt: f64, theta_deg: f64, constants: Option<PyConstants>) -> PyResult<Vec<(String, f64)>> {
    let field = FieldConfig::new(b_mt, theta_deg, 0.0).map_err(py_err)?;
    let sys = eigensolve(&hamiltonian::build_nv_hamiltonian(&consts(constants), &field)).map_err(py_err)?;
    let labels = sys.nv_labels().expect("9-dimensional system");
    Ok(labels.iter().map(ToString::to_string).zip(sys.energies.iter().cloned()).collect())
}

fn table(c: &PhysicalConstants, b_mt: f64, theta_deg: f64, beta: f64, mode_s: &str) -> PyResult<TransitionTable> {
    let sweep = transition_sweep(
        c,
        &[b_mt],
        theta_deg,
        SpinTemperature::new(beta).map_err(py_err)?,
        &IntensityOptions::default(),
    )
    .map_err(py_err)?;
    Ok(sweep[0].select(mode(mode_s)?))
}

/// Transition rows as a list of dicts (`freq_mhz`, `intensity`, `label_from`, ...).
#[pyfunction]
#[pyo3(signature = (b_mt, theta_deg=0.0, beta=0.0, mode="all", constants=None))]
fn transitions<'py>(
    py: Python<'py>,
    b_mt: f64,
    theta_deg: f64,
    beta: f64,
    mode: &str,
    constants: Option<PyConstants>,
) -> PyResult<Bound<'py, PyAny>> {
    let t = table(&consts(constants), b_mt, theta_deg, beta, mode)?;
    from_json(py, to_json(&t.rows))
}

/// Lorentzian spectrum of the selected lines on `grid` (MHz).
#[pyfunction]
#[pyo3(signature = (b_mt, grid, width_mhz=1.0, beta=0.0, theta_deg=0.0, mode="hi", constants=None))]
fn simulate(
    b_mt: f64,
    grid: Vec<f64>,
    width_mhz: f64,
    beta: f64,
    theta_deg: f64,
    mode: &str,
    constants: Option<PyConstants>,
) -> PyResult<Vec<f64>> {
    let t = table(&consts(constants), b_mt, theta_deg, beta, mode)?;
    spectrum::synthesize(&t, width_mhz, &grid).map(|m| m.values).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (grid, b_mt, beta=0.0, width_mhz=1.0, noise=0.01, seed=0, mode="hi", constants=None))]
#[allow(clippy::too_many_arguments)]
fn synthetic_spectrum(
    grid: Vec<f64>,
    b_mt: f64,
    beta: f64,
    width_mhz: f64,
    noise: f64,
    seed: u64,
    mode: &str,
    constants: Option<PyConstants>,
) -> PyResult<Vec<f64>> {
    let params = FitParams {
        beta,
        ..FitParams::new(b_mt, width_mhz)
    };
    let opts = FitOptions::for_mode(self::mode(mode)?);
    fitting::synthetic_spectrum(&consts(constants), &params, &opts, &grid, noise, seed)
        .map(|m| m.values)
        .map_err(py_err)
}

/// Fits a spectrum and returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (grid, values, b_mt, width_mhz=1.0, beta=0.0, mode="hi", constants=None))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    grid: Vec<f64>,
    values: Vec<f64>,
    b_mt: f64,
    width_mhz: f64,
    beta: f64,
    mode: &str,
    constants: Option<PyConstants>,
) -> PyResult<Bound<'py, PyAny>> {
    let data = MeasuredSpectrum::new(grid, values).map_err(py_err)?;
    let initial = FitParams {
        beta,
        ..FitParams::new(b_mt, width_mhz)
    };
    let c = consts(constants);
    let opts = FitOptions::for_mode(self::mode(mode)?);
    let r = py
        .detach(|| fitting::fit_spectrum(&c, &data, &initial, &FitBounds::around(b_mt), &opts))
        .map_err(py_err)?;
    from_json(py, to_json(&r))
}

/// Reads a spectrum CSV; returns `(grid, values, meta)`.
#[pyfunction]
#[pyo3(signature = (path, negate=false))]
fn read_spectrum(path: PathBuf, negate: bool) -> PyResult<(Vec<f64>, Vec<f64>, Option<f64>)> {
    let s = spectrum::read_spectrum(&path, negate).map_err(py_err)?;
    Ok((s.grid, s.values, s.meta.b_mt))
}

#[pyfunction]
fn orientation(n: [f64; 3]) -> PyResult<f64> {
    fitting::orientation(n).map_err(py_err)
}

#[pyfunction]
fn alignment(n: [f64; 3]) -> PyResult<f64> {
    fitting::alignment(n).map_err(py_err)
}

/// `(slope_mt_per_a, intercept_mt)` from `(current_a, b_mt)` pairs.
#[pyfunction]
fn calibrate(points: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    fitting::calibrate_field(&points)
        .map(|m| (m.slope, m.intercept))
        .map_err(py_err)
}

/// 13C Monte Carlo mean spectrum; returns `(mean, stderr)`.
#[pyfunction]
#[pyo3(signature = (b_mt, grid, width_mhz=1.0, beta=0.0, iterations=400, occupancy=0.011, seed=0, mode="hi", families=None, constants=None))]
#[allow(clippy::too_many_arguments)]
fn mc13(
    py: Python<'_>,
    b_mt: f64,
    grid: Vec<f64>,
    width_mhz: f64,
    beta: f64,
    iterations: usize,
    occupancy: f64,
    seed: u64,
    mode: &str,
    families: Option<PathBuf>,
    constants: Option<PyConstants>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let fams = match &families {
        Some(p) => load_families(p).map_err(py_err)?,
        None => default_families(),
    };
    let cfg = McConfig {
        iterations,
        occupancy,
        seed,
        family_file: families,
        ..Default::default()
    };
    let c = consts(constants);
    let m = self::mode(mode)?;
    let beta = SpinTemperature::new(beta).map_err(py_err)?;
    let r = py
        .detach(|| {
            mc_average_spectrum(
                &cfg,
                &fams,
                &FieldConfig::axial(b_mt),
                &c,
                beta,
                &IntensityOptions::default(),
                m,
                width_mhz,
                &grid,
            )
        })
        .map_err(py_err)?;
    Ok((r.mean.values, r.stderr))
}

#[pymodule(name = "nvgslac")]
fn nvgslac_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConstants>()?;
    m.add_function(wrap_pyfunction!(gslac_field, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_energies, m)?)?;
    m.add_function(wrap_pyfunction!(levels, m)?)?;
    m.add_function(wrap_pyfunction!(transitions, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(read_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(orientation, m)?)?;
    m.add_function(wrap_pyfunction!(alignment, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(mc13, m)?)?;
    Ok(())
}
