//! Python bindings. Configurations cross the boundary as JSON strings.

use std::path::PathBuf;

use perceiver_triage::data::{self, SynthSpec};
use perceiver_triage::metrics::{self, Averaging, DecisionRule, MetricsReport};
use perceiver_triage::model::{self, ModelConfig, ModelInput, ModelWeights, TabularMode, TabularToken};
use perceiver_triage::train::{self, Checkpoint};
use perceiver_triage::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn config_from_json(text: &str) -> PyResult<ModelConfig> {
    let config: ModelConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    config.validate().map_err(py_err)?;
    Ok(config)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    data::tokenize(text)
}

#[pyfunction]
fn truncate_icd(code: &str) -> PyResult<String> {
    data::truncate_icd(code).map_err(py_err)
}

/// Default model configuration as JSON; `tiny=True` gives the gradient-check size.
#[pyfunction]
#[pyo3(signature = (tiny = false))]
fn default_config(tiny: bool) -> PyResult<String> {
    let config = if tiny {
        ModelConfig::tiny()
    } else {
        ModelConfig::default()
    };
    serde_json::to_string(&config).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
#[pyo3(signature = (scores, labels, averaging = "macro"))]
fn roc_auc(scores: Vec<Vec<f64>>, labels: Vec<usize>, averaging: &str) -> PyResult<f64> {
    let averaging = match averaging {
        "macro" => Averaging::Macro,
        "micro" => Averaging::Micro,
        other => return Err(PyValueError::new_err(format!("unknown averaging `{other}`"))),
    };
    metrics::roc_auc(&scores, &labels, averaging).map_err(py_err)
}

/// All scalar metrics for row-stochastic `probs` against integer `labels`.
#[pyfunction]
#[pyo3(signature = (probs, labels, rule = "argmax"))]
fn evaluate<'py>(
    py: Python<'py>,
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    rule: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let rule: DecisionRule = parse(rule)?;
    let report = MetricsReport::compute(&probs, &labels, rule).map_err(py_err)?;
    let out = PyDict::new(py);
    for (name, value) in report.scalars() {
        out.set_item(name, value)?;
    }
    out.set_item("per_class_auc", report.per_class_auc)?;
    Ok(out)
}

/// Writes a synthetic corpus in the CSV layout the CLI reads.
#[pyfunction]
#[pyo3(signature = (out_dir, samples_per_class = 50, seed = 0))]
fn synth(out_dir: PathBuf, samples_per_class: usize, seed: u64) -> PyResult<usize> {
    let spec = SynthSpec {
        samples_per_class,
        seed,
        ..SynthSpec::default()
    };
    spec.validate().map_err(py_err)?;
    let corpus = data::synth_generate(&spec).map_err(py_err)?;
    data::write_corpus_csv(&corpus, &out_dir).map_err(py_err)?;
    Ok(corpus.visits.len())
}

/// Largest relative error between analytic and finite-difference gradients
/// of the tiny configuration.
#[pyfunction]
#[pyo3(signature = (tabular_mode = "feature_id", seed = 7, eps = 1e-4))]
fn gradcheck(tabular_mode: &str, seed: u64, eps: f64) -> PyResult<f64> {
    let config = ModelConfig {
        tabular_mode: parse::<TabularMode>(tabular_mode)?,
        ..ModelConfig::tiny()
    };
    let weights = ModelWeights::init(&config, seed).map_err(py_err)?;
    let (inputs, labels) = model::random_inputs(&config, 2, seed + 1);
    let report = model::check_model_gradients(&weights, &inputs, &labels, &config, eps).map_err(py_err)?;
    Ok(report.max_rel_err())
}

#[pyclass]
struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

#[pymethods]
impl Model {
    /// Freshly initialized model from a JSON configuration.
    #[new]
    #[pyo3(signature = (config_json, seed = 0))]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let config = config_from_json(config_json)?;
        let weights = ModelWeights::init(&config, seed).map_err(py_err)?;
        Ok(Self { config, weights })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let Checkpoint { meta, weights } = train::load_checkpoint(&path).map_err(py_err)?;
        Ok(Self {
            config: meta.model,
            weights,
        })
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.weights.iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Logits for one visit: vocabulary ids and z-scored vitals in canonical
    /// feature order.
    #[pyo3(signature = (token_ids, vitals, missing = None))]
    fn logits(&self, token_ids: Vec<usize>, vitals: Vec<f64>, missing: Option<Vec<bool>>) -> PyResult<Vec<f64>> {
        let missing = missing.unwrap_or_else(|| vec![false; vitals.len()]);
        if missing.len() != vitals.len() {
            return Err(PyValueError::new_err("vitals and missing differ in length"));
        }
        let input = ModelInput {
            token_ids,
            tabular: vitals
                .iter()
                .zip(&missing)
                .enumerate()
                .map(|(feature, (&value, &missing))| TabularToken {
                    feature,
                    value,
                    missing,
                })
                .collect(),
        };
        let out =
            model::forward_batch(std::slice::from_ref(&input), &self.weights, &self.config, false).map_err(py_err)?;
        Ok(out.logits.data().to_vec())
    }
}

#[pymodule]
fn perceiver_triage_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(truncate_icd, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
