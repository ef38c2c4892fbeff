//! Python bindings.
//!
//! Configs travel as TOML strings and results as CSV text or plain dicts, so
//! the Python side needs nothing beyond the standard library.

use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cmlreid::checkpoint::Checkpoint;
use cmlreid::cli::{cmd_ablate, cmd_orders, cmd_run, cmd_sweep, SweepParam};
use cmlreid::config::ExperimentConfig;
use cmlreid::evaluation::{forgetting_report, mechanism_analyses, rank_gallery, scores_from_rankings};
use cmlreid::lifelong;
use cmlreid::numerics::Matrix;
use cmlreid::world::{ClothingState, SyntheticSample, World};
use cmlreid::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_)
        | Error::Dimension { .. }
        | Error::Label { .. }
        | Error::Protocol(_)
        | Error::Range { .. }
        | Error::Corrupt { .. }
        | Error::SchemaVersion { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config_from(toml: Option<&str>) -> PyResult<ExperimentConfig> {
    let cfg = match toml {
        Some(text) => ExperimentConfig::from_toml(text).map_err(py_err)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

/// Default experiment config as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// Validates a TOML config and returns it in canonical form.
#[pyfunction]
fn normalize_config(toml: &str) -> PyResult<String> {
    Ok(config_from(Some(toml))?.to_toml())
}

/// Schema-versioned descriptor of the synthetic world built from `seed`.
#[pyfunction]
fn world_descriptor(seed: u64) -> String {
    World::build(seed).descriptor().to_toml()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("feature list is empty"));
    }
    Matrix::from_rows(&rows).map_err(py_err)
}

fn metadata(ids: &[u32], outfits: &[u32], state: ClothingState) -> Vec<SyntheticSample> {
    ids.iter()
        .zip(outfits)
        .map(|(&identity, &outfit)| SyntheticSample {
            latent: Vec::new(),
            identity,
            outfit,
            domain: 0,
            state,
        })
        .collect()
}

/// Cosine-ranked retrieval scores `(mAP, rank1)` in percent.
///
/// With `cloth_changing=True`, gallery entries sharing identity and outfit
/// with the query are removed before ranking.
#[pyfunction]
#[pyo3(signature = (query, query_ids, query_outfits, gallery, gallery_ids, gallery_outfits, cloth_changing=false))]
fn retrieval_scores(
    query: Vec<Vec<f64>>,
    query_ids: Vec<u32>,
    query_outfits: Vec<u32>,
    gallery: Vec<Vec<f64>>,
    gallery_ids: Vec<u32>,
    gallery_outfits: Vec<u32>,
    cloth_changing: bool,
) -> PyResult<(f64, f64)> {
    if query.len() != query_ids.len() || query.len() != query_outfits.len() {
        return Err(PyValueError::new_err("query features, ids and outfits differ in length"));
    }
    if gallery.len() != gallery_ids.len() || gallery.len() != gallery_outfits.len() {
        return Err(PyValueError::new_err("gallery features, ids and outfits differ in length"));
    }
    let state = if cloth_changing { ClothingState::CC } else { ClothingState::SC };
    let q = metadata(&query_ids, &query_outfits, state);
    let g = metadata(&gallery_ids, &gallery_outfits, state);
    let rankings = rank_gallery(&matrix(query)?, &q, &matrix(gallery)?, &g, state).map_err(py_err)?;
    let s = scores_from_rankings(&rankings).map_err(py_err)?;
    Ok((s.map, s.rank1))
}

/// A lifelong training run that can be stepped task by task and checkpointed.
#[pyclass(unsendable)]
struct Experiment {
    inner: lifelong::Experiment,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let inner = lifelong::Experiment::new(config_from(config)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        let ck = Checkpoint::from_text(text).map_err(py_err)?;
        let inner = lifelong::Experiment::from_checkpoint(&ck).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn sequence(&self) -> Vec<String> {
        self.inner.sequence.clone()
    }

    #[getter]
    fn completed(&self) -> usize {
        self.inner.completed
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }

    fn config(&self) -> String {
        self.inner.config.to_toml()
    }

    /// Trains the next task; returns False once the sequence is exhausted.
    fn step(&mut self, py: Python<'_>) -> PyResult<bool> {
        let inner = &mut self.inner;
        py.detach(|| inner.step_task()).map_err(py_err)
    }

    fn run_to_end(&mut self, py: Python<'_>) -> PyResult<()> {
        let inner = &mut self.inner;
        py.detach(|| inner.run_to_end()).map_err(py_err)
    }

    fn matrix_csv(&self) -> String {
        self.inner.matrix.to_csv()
    }

    fn epoch_csv(&self) -> String {
        self.inner.epoch_csv()
    }

    fn checkpoint(&self) -> String {
        self.inner.checkpoint().to_text()
    }

    /// Total, SC and CC averages over the last matrix row.
    fn summary(&self) -> HashMap<String, f64> {
        let m = &self.inner.matrix;
        let mut out = HashMap::new();
        for (name, avg) in [
            ("total", m.total_average()),
            ("sc", m.sc_average()),
            ("cc", m.cc_average()),
        ] {
            if let Some(a) = avg {
                out.insert(format!("{name}_map"), a.map);
                out.insert(format!("{name}_rank1"), a.rank1);
            }
        }
        let drops = forgetting_report(m);
        if !drops.is_empty() {
            out.insert("mean_forgetting".into(), drops.iter().map(|d| d.drop).sum::<f64>() / drops.len() as f64);
        }
        out
    }

    /// `(metric, category, value)` rows of the mechanism analyses.
    fn analysis(&self) -> PyResult<Vec<(String, String, f64)>> {
        let report = mechanism_analyses(&self.inner.model, &self.inner.world).map_err(py_err)?;
        Ok(report.long_format())
    }
}

/// Runs a CLI command and returns the output directory.
#[pyfunction]
#[pyo3(signature = (command, config=None, param=None, values=None))]
fn run_command(
    py: Python<'_>,
    command: &str,
    config: Option<&str>,
    param: Option<&str>,
    values: Option<Vec<f64>>,
) -> PyResult<String> {
    let cfg = config_from(config)?;
    let dir = match command {
        "run" => py.detach(|| cmd_run(&cfg)).map_err(py_err)?.0,
        "orders" => py.detach(|| cmd_orders(&cfg)).map_err(py_err)?.0,
        "ablate" => py.detach(|| cmd_ablate(&cfg)).map_err(py_err)?.0,
        "sweep" => {
            let p = match param {
                Some("lambda") => SweepParam::Lambda,
                Some("beta") => SweepParam::Beta,
                other => return Err(PyValueError::new_err(format!("sweep needs param lambda or beta, got {other:?}"))),
            };
            let values = values.unwrap_or_else(|| p.defaults().to_vec());
            py.detach(|| cmd_sweep(&cfg, p, &values)).map_err(py_err)?.0
        }
        other => return Err(PyValueError::new_err(format!("unknown command `{other}`"))),
    };
    Ok(dir.to_string_lossy().into_owned())
}

#[pymodule]
#[pyo3(name = "cmlreid")]
fn cmlreid_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(world_descriptor, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_scores, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
