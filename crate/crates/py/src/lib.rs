//! Python bindings: reference potentials, trained models from a run
//! directory, metric kernels, and the pipeline commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ffstack::cli::{self, ModelRef, RunConfig, Workspace};
use ffstack::extxyz::parse_extxyz;
use ffstack::mdsim::{compute_hr, mae_hr};
use ffstack::metrics::rmse_mae;
use ffstack::refpes::{eval_ref, RefPotentialSpec};
use ffstack::structure::Vec3;
use ffstack::{Error, ForceProvider, Structure};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Validation(_) => PyValueError::new_err(e.to_string()),
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn molecule(species: Vec<u8>, positions: Vec<Vec3>) -> PyResult<Structure> {
    Structure::molecule(species, positions).map_err(py_err)
}

fn workspace(config: Option<PathBuf>) -> PyResult<Workspace> {
    let cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(py_err)?,
        None => RunConfig::default(),
    };
    Workspace::open(cfg).map_err(py_err)
}

/// Analytic reference potential: `"pseudo_methane"` or `"lj_argon"`.
#[pyclass(frozen)]
struct Reference(RefPotentialSpec);

#[pymethods]
impl Reference {
    #[new]
    fn new(kind: &str) -> PyResult<Self> {
        match kind {
            "pseudo_methane" => Ok(Reference(RefPotentialSpec::pseudo_methane())),
            "lj_argon" => Ok(Reference(RefPotentialSpec::lj_argon())),
            _ => Err(PyValueError::new_err(format!("unknown reference potential '{kind}'"))),
        }
    }

    /// Energy (eV) and forces (eV/Å) of a molecule.
    fn compute(&self, species: Vec<u8>, positions: Vec<Vec3>) -> PyResult<(f64, Vec<Vec3>)> {
        eval_ref(&self.0, &molecule(species, positions)?).map_err(py_err)
    }
}

/// A model loaded from a run directory: `base:<id>`, `mean_baseline`,
/// `direct`, `conserv` or `reference`.
#[pyclass(frozen)]
struct Model {
    inner: Box<dyn ForceProvider + Send>,
    name: String,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (model, config=None))]
    fn load(model: &str, config: Option<PathBuf>) -> PyResult<Self> {
        let ws = workspace(config)?;
        let m = ModelRef::parse(model).map_err(py_err)?;
        let inner = ws.provider(&m).map_err(py_err)?;
        Ok(Model { inner, name: m.name() })
    }

    #[getter]
    fn name(&self) -> String {
        self.name.clone()
    }

    /// Energy (eV, `None` for force-only models) and forces (eV/Å).
    fn compute(&self, py: Python<'_>, species: Vec<u8>, positions: Vec<Vec3>) -> PyResult<(Option<f64>, Vec<Vec3>)> {
        let s = molecule(species, positions)?;
        let out = py.detach(|| self.inner.compute(&s)).map_err(py_err)?;
        Ok((out.energy, out.forces))
    }
}

/// Runs one pipeline command (`gen-data`, `train`, `eval`, `md`,
/// `subset-scan`, `report`) and returns the written paths.
#[pyfunction]
#[pyo3(signature = (command, config=None, target=None))]
fn run(py: Python<'_>, command: &str, config: Option<PathBuf>, target: Option<String>) -> PyResult<Vec<PathBuf>> {
    let ws = workspace(config)?;
    let need = || target.clone().ok_or_else(|| PyValueError::new_err(format!("'{command}' needs a target")));
    let out = match command {
        "gen-data" => py.detach(|| cli::cmd_gen_data(&ws)),
        "train" => {
            let t = need()?;
            py.detach(|| cli::cmd_train(&ws, &t))
        }
        "eval" | "md" => {
            let m = ModelRef::parse(&need()?).map_err(py_err)?;
            if command == "eval" {
                py.detach(|| cli::cmd_eval(&ws, &m))
            } else {
                py.detach(|| cli::cmd_md(&ws, &m))
            }
        }
        "subset-scan" => py.detach(|| cli::cmd_subset_scan(&ws)),
        "report" => py.detach(|| cli::cmd_report(&ws)),
        _ => return Err(PyValueError::new_err(format!("unknown command '{command}'"))),
    };
    out.map_err(py_err)
}

/// Frame count, per-frame atom counts and energies of an extended-XYZ text.
#[pyfunction]
fn read_extxyz(text: &str) -> PyResult<Vec<(usize, f64)>> {
    let d = parse_extxyz(text).map_err(py_err)?;
    Ok(d.items.iter().map(|it| (it.structure.len(), it.energy)).collect())
}

/// `(rmse, mae)` of a flat residual list.
#[pyfunction]
fn residual_rmse_mae(residuals: Vec<f64>) -> (f64, f64) {
    rmse_mae(&residuals)
}

/// Interatomic-distance distribution of molecular frames sharing `species`.
#[pyfunction]
fn distance_histogram(species: Vec<u8>, frames: Vec<Vec<Vec3>>, r_max: f64, n_bins: usize) -> PyResult<Vec<f64>> {
    let s: Vec<Structure> = frames.into_iter().map(|p| molecule(species.clone(), p)).collect::<PyResult<_>>()?;
    Ok(compute_hr(&s, r_max, n_bins).map_err(py_err)?.densities)
}

/// Σ|a − b|·Δr between two histograms on `[0, r_max]`.
#[pyfunction]
fn histogram_mae(a: Vec<f64>, b: Vec<f64>, r_max: f64) -> PyResult<f64> {
    let h = |d: Vec<f64>| ffstack::mdsim::HrHistogram { r_max, n_bins: d.len(), densities: d };
    mae_hr(&h(a), &h(b)).map_err(py_err)
}

#[pymodule]
fn ffstack_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Reference>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(read_extxyz, m)?)?;
    m.add_function(wrap_pyfunction!(residual_rmse_mae, m)?)?;
    m.add_function(wrap_pyfunction!(distance_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(histogram_mae, m)?)?;
    Ok(())
}
