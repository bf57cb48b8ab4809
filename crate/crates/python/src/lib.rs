//! Python bindings for the displacement-effect engine.
//!
//! Structured results cross the boundary as JSON strings; numeric vectors as
//! Python lists.

use std::path::PathBuf;

use jobloss_core::dgp::{self, DgpConfig};
use jobloss_core::evaluate::{self, Weighting};
use jobloss_core::forest::{self, ForestParams};
use jobloss_core::ingest;
use jobloss_core::pipeline::{self, PipelineConfig};
use jobloss_core::policy::{self, PolicyTreeParams};
use jobloss_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Separation { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn growth_metric(emp_a: f64, emp_b: f64) -> PyResult<f64> {
    ingest::growth_metric(emp_a, emp_b).map_err(to_py)
}

#[pyfunction]
fn churn_rate(hires: f64, separations: f64, emp_t: f64, emp_prev: f64) -> PyResult<f64> {
    ingest::churn_rate(hires, separations, emp_t, emp_prev).map_err(to_py)
}

#[pyfunction]
fn reallocation_rate(creation: f64, destruction: f64, emp_t: f64, emp_prev: f64) -> PyResult<f64> {
    ingest::reallocation_rate(creation, destruction, emp_t, emp_prev).map_err(to_py)
}

#[pyfunction]
fn hhi(shares: Vec<f64>) -> PyResult<f64> {
    ingest::hhi(&shares).map_err(to_py)
}

#[pyfunction]
fn aipw_score(w: f64, y: f64, e_hat: f64, m_hat: f64, tau_hat: f64) -> f64 {
    evaluate::aipw_score(w, y, e_hat, m_hat, tau_hat)
}

#[pyfunction]
fn theory_effect(q: f64, b: f64, beta: f64, p: f64) -> PyResult<f64> {
    dgp::theory_effect(q, b, beta, p).map_err(to_py)
}

#[pyfunction]
fn insurance_degree(ate_earnings: f64, ate_disposable: f64) -> PyResult<f64> {
    evaluate::insurance_degree(ate_earnings, ate_disposable).map_err(to_py)
}

/// Qini (`weighting="qini"`) or AUTOC (`"autoc"`) with bootstrap SE, as JSON.
#[pyfunction]
#[pyo3(signature = (priority, gamma, clusters, weighting="qini", n_bootstrap=200, seed=0))]
fn rate(
    priority: Vec<f64>,
    gamma: Vec<f64>,
    clusters: Vec<u64>,
    weighting: &str,
    n_bootstrap: usize,
    seed: u64,
) -> PyResult<String> {
    let w = match weighting {
        "qini" => Weighting::Qini,
        "autoc" => Weighting::Autoc,
        other => return Err(PyValueError::new_err(format!("unknown weighting `{other}`"))),
    };
    let r = evaluate::rate_qini(&priority, &gamma, &clusters, w, n_bootstrap, seed).map_err(to_py)?;
    serde_json::to_string(&r).map_err(json_err)
}

/// Exact policy tree on column-major covariates; returns the tree as JSON.
#[pyfunction]
#[pyo3(signature = (columns, names, gamma, cost=0.0, depth=2, n_thresholds=50))]
fn fit_policy_tree(
    columns: Vec<Vec<f64>>,
    names: Vec<String>,
    gamma: Vec<f64>,
    cost: f64,
    depth: usize,
    n_thresholds: usize,
) -> PyResult<String> {
    let params = PolicyTreeParams { depth, n_thresholds };
    let tree = policy::fit_policy_tree(&columns, &names, &gamma, cost, &params).map_err(to_py)?;
    tree.to_json().map_err(to_py)
}

/// Write `panel.csv` and `oracle.csv` for a generator configuration (JSON,
/// defaults when omitted). Returns the written paths.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None))]
fn simulate(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<Vec<String>> {
    let cfg = match config_json {
        Some(t) => DgpConfig::from_json(t).map_err(to_py)?,
        None => DgpConfig::default(),
    };
    let written = pipeline::step_simulate(&cfg, &out_dir).map_err(to_py)?;
    Ok(written.into_iter().map(|p| p.display().to_string()).collect())
}

/// Run the cached pipeline from a JSON configuration; returns the manifest.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = PipelineConfig::from_json(config_json).map_err(to_py)?;
    let m = py.detach(|| pipeline::run_pipeline(&cfg, &mut |_, _| {})).map_err(to_py)?;
    serde_json::to_string(&m).map_err(json_err)
}

/// A fitted causal forest.
#[pyclass(module = "jobloss")]
struct CausalForest {
    inner: forest::CausalForest,
}

#[pymethods]
impl CausalForest {
    /// Fit on column-major covariates. `params_json` holds forest parameters.
    #[staticmethod]
    #[pyo3(signature = (columns, y, w, clusters, names, params_json=None))]
    fn fit(
        py: Python<'_>,
        columns: Vec<Vec<f64>>,
        y: Vec<f64>,
        w: Vec<f64>,
        clusters: Vec<u64>,
        names: Vec<String>,
        params_json: Option<&str>,
    ) -> PyResult<Self> {
        let params: ForestParams = match params_json {
            Some(t) => serde_json::from_str(t).map_err(json_err)?,
            None => ForestParams::default(),
        };
        let inner =
            py.detach(|| forest::CausalForest::fit(&columns, &y, &w, &clusters, &names, &params)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: forest::CausalForest::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// CATE for each row; rows that cannot be predicted give `nan`.
    fn predict(&self, py: Python<'_>, rows: Vec<Vec<f64>>) -> Vec<f64> {
        py.detach(|| self.inner.predict_rows(&rows))
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names.clone()
    }

    #[getter]
    fn num_trees(&self) -> usize {
        self.inner.trees.len()
    }
}

#[pymodule]
fn jobloss(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(growth_metric, m)?)?;
    m.add_function(wrap_pyfunction!(churn_rate, m)?)?;
    m.add_function(wrap_pyfunction!(reallocation_rate, m)?)?;
    m.add_function(wrap_pyfunction!(hhi, m)?)?;
    m.add_function(wrap_pyfunction!(aipw_score, m)?)?;
    m.add_function(wrap_pyfunction!(theory_effect, m)?)?;
    m.add_function(wrap_pyfunction!(insurance_degree, m)?)?;
    m.add_function(wrap_pyfunction!(rate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_policy_tree, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_class::<CausalForest>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
