//! Python bindings: synthetic data, the scoring network with its MC-dropout
//! posterior, loss and metric helpers, and the simulated active learning loop.

use bayesrank::data::{synth_generate, SampleId};
use bayesrank::ranker::{self, RelativeLabel};
use bayesrank::run::RunConfig;
use bayesrank::{bayes, metrics, nn, run_loop, Error, NetworkParams, Sampler, SimulatedOracle, SynthConfig};
use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// A labeled dataset of feature vectors.
#[pyclass(name = "Dataset", module = "bayesrank_py", frozen)]
struct PyDataset {
    inner: bayesrank::Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn features(&self, index: usize) -> PyResult<Vec<f64>> {
        self.check(index)?;
        Ok(self.inner.features(SampleId(index as u32)).to_vec())
    }

    fn label(&self, index: usize) -> PyResult<Option<u32>> {
        self.check(index)?;
        Ok(self.inner.label(SampleId(index as u32)))
    }

    fn name(&self, index: usize) -> PyResult<String> {
        self.check(index)?;
        Ok(self.inner.sample(SampleId(index as u32)).name.clone())
    }

    fn labels(&self) -> Vec<Option<u32>> {
        self.inner.samples().iter().map(|s| s.label).collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(len={}, feature_dim={})", self.inner.len(), self.inner.feature_dim())
    }
}

impl PyDataset {
    fn check(&self, index: usize) -> PyResult<()> {
        if index < self.inner.len() {
            Ok(())
        } else {
            Err(PyIndexError::new_err(format!("sample {index} out of range")))
        }
    }
}

/// Generate an imbalanced ordinal dataset.
#[pyfunction]
#[pyo3(signature = (n=5000, proportions=None, feature_dim=16, noise_scale=0.3, seed=0))]
fn synth(n: usize, proportions: Option<Vec<f64>>, feature_dim: usize, noise_scale: f64, seed: u64) -> PyResult<PyDataset> {
    let mut config = SynthConfig { n, feature_dim, noise_scale, seed, ..Default::default() };
    if let Some(p) = proportions {
        config.num_classes = p.len();
        config.class_proportions = p;
    }
    let data = synth_generate(&config).map_err(to_py)?;
    Ok(PyDataset { inner: data.dataset })
}

/// Feedforward scoring network with dropout on its hidden layers.
#[pyclass(name = "Network", module = "bayesrank_py")]
struct PyNetwork {
    inner: NetworkParams,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (layer_sizes, seed=0, dropout_rate=0.2, weight_decay=1e-4))]
    fn new(layer_sizes: Vec<usize>, seed: u64, dropout_rate: f64, weight_decay: f64) -> PyResult<Self> {
        let inner = nn::init_network(&layer_sizes, seed)
            .and_then(|p| p.with_regularization(dropout_rate, weight_decay))
            .map_err(to_py)?;
        Ok(PyNetwork { inner })
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes.clone()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Weight-decay term `lambda * sum ||W||^2`.
    fn penalty(&self) -> f64 {
        self.inner.penalty()
    }

    /// Deterministic score (hidden outputs scaled by the keep probability).
    fn score(&self, features: Vec<f64>) -> PyResult<f64> {
        nn::forward(&self.inner, &features, None).map_err(to_py)
    }

    /// Monte Carlo dropout posterior: `(mean, variance, draws)`.
    #[pyo3(signature = (features, draws=30, seed=0))]
    fn posterior(&self, features: Vec<f64>, draws: usize, seed: u64) -> PyResult<(f64, f64, Vec<f64>)> {
        let p = bayes::predict_posterior(&self.inner, SampleId(0), &features, draws, seed).map_err(to_py)?;
        Ok((p.mean, p.variance, p.draws))
    }

    /// Rank loss of `(left, right)` feature pairs with labels in {0, 0.5, 1},
    /// evaluated without dropout, including the weight-decay term.
    fn loss(&self, pairs: Vec<(Vec<f64>, Vec<f64>)>, labels: Vec<f64>) -> PyResult<f64> {
        if pairs.len() != labels.len() {
            return Err(PyValueError::new_err("pairs and labels differ in length"));
        }
        let batch: Vec<nn::PairExample> = pairs
            .iter()
            .zip(&labels)
            .map(|((l, r), &label)| nn::PairExample { left: l, right: r, label, targets: None })
            .collect();
        nn::objective(&self.inner, &batch, None, nn::LossSpec::Rank).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Network(layer_sizes={:?})", self.inner.layer_sizes)
    }
}

/// `P = sigmoid(s_i - s_j)`.
#[pyfunction]
fn pair_probability(score_i: f64, score_j: f64) -> PyResult<f64> {
    ranker::pair_probability(score_i, score_j).map_err(to_py)
}

/// Pairwise cross-entropy of one scored pair (no weight decay).
#[pyfunction]
fn pair_loss(score_i: f64, score_j: f64, label: f64) -> PyResult<f64> {
    RelativeLabel::try_from(label).map_err(to_py)?;
    ranker::pair_terms(score_i, score_j, label, None, nn::LossSpec::Rank)
        .map(|t| t.loss)
        .map_err(to_py)
}

/// Round a rank score half up and clamp it to a class index.
#[pyfunction]
fn quantize_score(score: f64, num_classes: usize) -> PyResult<u32> {
    metrics::quantize_score(score, num_classes).map_err(to_py)
}

/// Annotation time in seconds: 1 s per relative pair, 20 s per absolute label.
#[pyfunction]
fn annotation_cost(relative_pairs: u64, absolute_images: u64) -> u64 {
    metrics::annotation_cost(relative_pairs, absolute_images)
}

/// Continuity-corrected McNemar statistic.
#[pyfunction]
fn mcnemar_statistic(only_a_correct: u64, only_b_correct: u64) -> f64 {
    metrics::mcnemar_statistic(only_a_correct, only_b_correct)
}

/// Run the loop against the simulated annotator. `config` is a JSON run
/// configuration (same schema as the CLI); returns the per-round records
/// as a JSON array.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None, sampler=None))]
fn run(py: Python<'_>, config: Option<&str>, seed: Option<u64>, sampler: Option<&str>) -> PyResult<String> {
    let mut config: RunConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.set_seed(s);
    }
    if let Some(s) = sampler {
        config.settings.loop_config.sampler = s.parse::<Sampler>().map_err(to_py)?;
    }
    let rounds = py.detach(|| {
        let (dataset, split) = config.materialize()?;
        let mut oracle = SimulatedOracle::new(&dataset).with_noise(config.flip_probability, config.settings.loop_config.seed)?;
        let state = run_loop(&dataset, split, &mut oracle, config.settings.clone(), None)?;
        Ok::<_, Error>(state.metrics_by_round)
    });
    let rounds = rounds.map_err(to_py)?;
    serde_json::to_string(&rounds).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn bayesrank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(pair_probability, m)?)?;
    m.add_function(wrap_pyfunction!(pair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_score, m)?)?;
    m.add_function(wrap_pyfunction!(annotation_cost, m)?)?;
    m.add_function(wrap_pyfunction!(mcnemar_statistic, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
