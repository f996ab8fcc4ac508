//! Python bindings: datasets, training, sampling and evaluation.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use relflow::error::Error;
use relflow::evalkit::{evaluate as eval_datasets, EvalOptions};
use relflow::pipeline::{generate, train, Checkpoint, RunConfig};
use relflow::relschema::{ingest, write_dataset, RelationalDataset, RelationalSchema};
use relflow::toy::{self, ToyConfig};

create_exception!(relflow_py, RelflowError, PyException);
create_exception!(relflow_py, NumericError, RelflowError);

fn to_py(e: Error) -> PyErr {
    if e.is_numeric() {
        NumericError::new_err(e.to_string())
    } else {
        RelflowError::new_err(e.to_string())
    }
}

#[pyclass(module = "relflow_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Schema {
    inner: RelationalSchema,
}

#[pymethods]
impl Schema {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        RelationalSchema::parse(text).map(|inner| Schema { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        RelationalSchema::from_file(&path).map(|inner| Schema { inner }).map_err(to_py)
    }

    #[getter]
    fn tables(&self) -> Vec<String> {
        self.inner.tables.iter().map(|t| t.name.clone()).collect()
    }

    fn structure_hash(&self) -> String {
        self.inner.structure_hash()
    }
}

#[pyclass(module = "relflow_py", frozen)]
struct Dataset {
    inner: RelationalDataset,
}

#[pymethods]
impl Dataset {
    /// Read `<table>.csv` for every table of `schema` from `directory`.
    #[staticmethod]
    fn ingest(schema: &Schema, directory: PathBuf) -> PyResult<Self> {
        ingest(&schema.inner, &directory).map(|inner| Dataset { inner }).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (parents = 500, seed = 0, match_prob = 0.9))]
    fn toy(parents: usize, seed: u64, match_prob: f64) -> PyResult<Self> {
        toy::generate(&ToyConfig {
            parents,
            seed,
            match_prob,
            ..ToyConfig::default()
        })
        .map(|inner| Dataset { inner })
        .map_err(to_py)
    }

    fn write(&self, directory: PathBuf) -> PyResult<()> {
        write_dataset(&self.inner, &directory).map_err(to_py)
    }

    #[getter]
    fn schema(&self) -> Schema {
        Schema {
            inner: self.inner.schema.structure(),
        }
    }

    /// `(table name, row count)` pairs in schema order.
    fn row_counts(&self) -> Vec<(String, usize)> {
        self.inner
            .schema
            .tables
            .iter()
            .zip(&self.inner.tables)
            .map(|(s, t)| (s.name.clone(), t.n_rows))
            .collect()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// Fraction of `child` rows whose segment equals their parent's (toy schema only).
    fn match_rate(&self) -> PyResult<f64> {
        toy::match_rate(&self.inner).map_err(to_py)
    }

    fn chance_match_rate(&self) -> PyResult<f64> {
        toy::chance_match_rate(&self.inner).map_err(to_py)
    }
}

#[pyclass(module = "relflow_py", frozen)]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    /// Train on `data`. `config` is TOML text; `overrides` are `key=value`
    /// strings; `callback(epoch, train, val)` is called after every epoch.
    #[staticmethod]
    #[pyo3(signature = (data, config = None, overrides = Vec::new(), seed = None, callback = None))]
    fn fit(
        py: Python<'_>,
        data: &Dataset,
        config: Option<&str>,
        overrides: Vec<String>,
        seed: Option<u64>,
        callback: Option<Py<PyAny>>,
    ) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => RunConfig::parse(text).map_err(to_py)?,
            None => RunConfig::default(),
        };
        for o in &overrides {
            cfg.apply_override(o).map_err(to_py)?;
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        let mut cb_err = None;
        let ckpt = train(&data.inner, &cfg, &mut |s| {
            if let Some(cb) = &callback {
                if cb_err.is_none() {
                    if let Err(e) = cb.call1(py, (s.epoch, s.train, s.val)) {
                        cb_err = Some(e);
                    }
                }
            }
        })
        .map_err(to_py)?;
        if let Some(e) = cb_err {
            return Err(e);
        }
        Ok(Model { inner: ckpt })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(|inner| Model { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Synthetic dataset on a topology resampled from `real`.
    #[pyo3(signature = (real, seed = 0))]
    fn sample(&self, real: &Dataset, seed: u64) -> PyResult<Dataset> {
        generate(&self.inner.model, &real.inner, seed)
            .map(|inner| Dataset { inner })
            .map_err(to_py)
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    #[getter]
    fn best_val(&self) -> f64 {
        self.inner.best_val
    }

    /// `[(epoch, train loss, validation loss)]`.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, f64)> {
        self.inner.history.iter().map(|h| (h.epoch, h.train, h.val)).collect()
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.model.config.to_toml()
    }
}

/// Fidelity and privacy report as a dict.
#[pyfunction]
#[pyo3(signature = (real, synth, holdout = None, seed = 0, alpha = relflow::evalkit::DEFAULT_ALPHA))]
fn evaluate<'py>(
    py: Python<'py>,
    real: &Dataset,
    synth: &Dataset,
    holdout: Option<&Dataset>,
    seed: u64,
    alpha: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = EvalOptions {
        seed,
        alpha,
        ..EvalOptions::default()
    };
    let report = eval_datasets(&real.inner, holdout.map(|h| &h.inner), &synth.inner, &opts).map_err(to_py)?;
    py.import("json")?.call_method1("loads", (report.to_json(),))
}

#[pymodule]
fn relflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Schema>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("RelflowError", m.py().get_type::<RelflowError>())?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add("TOY_SCHEMA", toy::SCHEMA)?;
    Ok(())
}
