//! Python bindings. Corpus records, configs and reports cross the boundary
//! as plain dicts/lists (via JSON); models are opaque classes.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use patient_repr::classifier::{self, Dataset, MlpConfig, MlpModel, PrimaryMetric, TaskSpec};
use patient_repr::container::{load_model, save_model};
use patient_repr::corpus::{self, FeatureMatrix, NormalizationMode, Normalizer, PatientRecord};
use patient_repr::doc2vec::{self, Doc2vecConfig, DocEmbeddingModel};
use patient_repr::interpret::{self, SensitivityOptions};
use patient_repr::sdae::{self, SdaeConfig, SdaeModel};
use patient_repr::{stats, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Training(m) => PyRuntimeError::new_err(format!("training diverged: {m}")),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Python object -> Rust value through `json.dumps`.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Applies the keys of an optional dict on top of a config's defaults.
fn config<T: Serialize + DeserializeOwned + Default>(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let mut base = serde_json::to_value(T::default()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(d) = overrides {
        let over: serde_json::Value = from_py(d.as_any())?;
        merge(&mut base, &over);
    }
    serde_json::from_value(base).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base.as_object_mut(), over.as_object()) {
        (Some(b), Some(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        _ => *base = over.clone(),
    }
}

fn mode(name: &str) -> PyResult<NormalizationMode> {
    name.parse().map_err(err)
}

#[pyfunction]
#[pyo3(signature = (text, mode = "sdae"))]
fn tokenize(text: &str, mode: &str) -> PyResult<Vec<String>> {
    Ok(corpus::tokenize_and_normalize(text, self::mode(mode)?))
}

/// Synthetic corpus as a list of record dicts.
#[pyfunction]
#[pyo3(signature = (spec = None))]
fn generate_synthetic_corpus<'py>(py: Python<'py>, spec: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let spec: corpus::SyntheticCorpusSpec = config(spec)?;
    to_py(py, &corpus::generate_synthetic_corpus(&spec).map_err(err)?)
}

#[pyclass(module = "patient_repr", frozen)]
struct Vocabulary {
    inner: corpus::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    #[staticmethod]
    #[pyo3(signature = (records, mode = "sdae", min_frequency = 5))]
    fn build(records: &Bound<'_, PyAny>, mode: &str, min_frequency: u64) -> PyResult<Self> {
        let records: Vec<PatientRecord> = from_py(records)?;
        let inner = corpus::build_vocabulary(&records, self::mode(mode)?, min_frequency, &Normalizer::default())
            .map_err(err)?;
        Ok(Self { inner })
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().map(str::to_string).collect()
    }

    fn frequencies(&self) -> Vec<u64> {
        self.inner.frequencies()
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.inner.id(token)
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// TF-IDF features of the given records over this vocabulary.
    fn featurize(&self, records: &Bound<'_, PyAny>) -> PyResult<Features> {
        let records: Vec<PatientRecord> = from_py(records)?;
        let inner = corpus::featurize_tfidf(&records, &self.inner, &Normalizer::default()).map_err(err)?;
        Ok(Features { inner })
    }
}

#[pyclass(module = "patient_repr", frozen)]
struct Features {
    inner: FeatureMatrix,
}

#[pymethods]
impl Features {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn patient_ids(&self) -> Vec<String> {
        self.inner.patient_ids.clone()
    }

    fn dense(&self) -> Vec<Vec<f64>> {
        self.inner.dense_rows()
    }

    fn select(&self, rows: Vec<usize>) -> PyResult<Self> {
        if let Some(&r) = rows.iter().find(|&&r| r >= self.inner.len()) {
            return Err(PyValueError::new_err(format!("row {r} out of range")));
        }
        Ok(Self { inner: self.inner.select(&rows) })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "patient_repr", frozen)]
struct Sdae {
    inner: SdaeModel,
}

#[pymethods]
impl Sdae {
    /// `config` keys: hidden_sizes, noise, epochs, batch_size, optimizer, seed.
    #[staticmethod]
    #[pyo3(signature = (features, config = None))]
    fn train(py: Python<'_>, features: &Features, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: SdaeConfig = self::config(config)?;
        let inner = py.detach(|| sdae::train_sdae(&features.inner, &cfg)).map_err(err)?;
        Ok(Self { inner })
    }

    fn encode(&self, features: &Features) -> PyResult<Vec<Vec<f64>>> {
        Ok(sdae::encode(&self.inner, &features.inner)
            .map_err(err)?
            .into_iter()
            .map(|r| r.values)
            .collect())
    }

    fn reconstruction_error(&self, features: &Features) -> PyResult<Vec<f64>> {
        Ok(sdae::feature_reconstruction_error(&self.inner, &features.inner).map_err(err)?.errors)
    }

    #[getter]
    fn loss_trace(&self) -> Vec<Vec<f64>> {
        self.inner.loss_trace.clone()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.inner, path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_model(path).map_err(err)? })
    }
}

#[pyclass(module = "patient_repr", frozen)]
struct Doc2vec {
    inner: DocEmbeddingModel,
}

#[pymethods]
impl Doc2vec {
    /// `docs` are token lists, e.g. from `tokenize(text, "doc2vec")`.
    #[staticmethod]
    #[pyo3(signature = (patient_ids, docs, config = None))]
    fn train(
        py: Python<'_>,
        patient_ids: Vec<String>,
        docs: Vec<Vec<String>>,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let cfg: Doc2vecConfig = self::config(config)?;
        let inner = py.detach(|| doc2vec::train_dbow(patient_ids, &docs, &cfg)).map_err(err)?;
        Ok(Self { inner })
    }

    fn vectors(&self) -> Vec<Vec<f64>> {
        self.inner.representations().into_iter().map(|r| r.values).collect()
    }

    fn infer(&self, tokens: Vec<String>) -> PyResult<Vec<f64>> {
        Ok(doc2vec::infer_doc_vector(&self.inner, &tokens, &self.inner.config)
            .map_err(err)?
            .vector)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.inner, path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_model(path).map_err(err)? })
    }
}

fn task(name: &str, n_classes: Option<usize>) -> PyResult<TaskSpec> {
    match n_classes {
        Some(n) => {
            let metric = if n == 2 { PrimaryMetric::Auroc } else { PrimaryMetric::WeightedF1 };
            TaskSpec::new(name, n, metric).map_err(err)
        }
        None => TaskSpec::standard(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown task {name:?}; pass n_classes"))),
    }
}

#[pyclass(module = "patient_repr", frozen)]
struct Classifier {
    inner: MlpModel,
}

#[pymethods]
impl Classifier {
    #[staticmethod]
    #[pyo3(signature = (x, y, x_valid, y_valid, task, n_classes = None, config = None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        x_valid: Vec<Vec<f64>>,
        y_valid: Vec<usize>,
        task: &str,
        n_classes: Option<usize>,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let spec = self::task(task, n_classes)?;
        let cfg: MlpConfig = self::config(config)?;
        let train = Dataset::new(&x, &y).map_err(err)?;
        let valid = Dataset::new(&x_valid, &y_valid).map_err(err)?;
        let inner = py
            .detach(|| classifier::train_mlp_classifier(train, &spec, &cfg, valid))
            .map_err(err)?;
        Ok(Self { inner })
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        classifier::predict_proba(&self.inner, &x).map_err(err)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        classifier::predict(&self.inner, &x).map_err(err)
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.inner, path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_model(path).map_err(err)? })
    }
}

/// Ranked `(token, phi)` pairs for a frozen autoencoder + classifier.
#[pyfunction]
#[pyo3(signature = (sdae, classifier, features, tokens, logits = false, present_only = false))]
fn feature_significance(
    py: Python<'_>,
    sdae: &Sdae,
    classifier: &Classifier,
    features: &Features,
    tokens: Vec<String>,
    logits: bool,
    present_only: bool,
) -> PyResult<Vec<(String, f64)>> {
    let options = SensitivityOptions {
        output: if logits {
            patient_repr::nn::JacobianOutput::Logits
        } else {
            patient_repr::nn::JacobianOutput::Activations
        },
        present_only,
    };
    let report = py
        .detach(|| interpret::feature_significance(&sdae.inner, &classifier.inner, &features.inner, &tokens, options))
        .map_err(err)?;
    Ok(report.ranking.into_iter().map(|r| (r.token, r.phi)).collect())
}

/// One-vs-rest chi-squared scores, indexed `[class][feature]`.
#[pyfunction]
fn chi2_feature_scores(features: &Features, labels: Vec<usize>, n_classes: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(interpret::chi2_feature_scores(&features.inner, &labels, n_classes)
        .map_err(err)?
        .scores)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<usize>) -> PyResult<f64> {
    classifier::auroc(&scores, &labels).map_err(err)
}

#[pyfunction]
fn weighted_f1(predicted: Vec<usize>, truth: Vec<usize>, n_classes: usize) -> PyResult<f64> {
    classifier::weighted_f1(&predicted, &truth, n_classes).map_err(err)
}

#[pyfunction]
fn cohens_kappa(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    stats::cohens_kappa(&a, &b).map_err(err)
}

#[pyfunction]
fn spearman_rho(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    stats::spearman_rho(&x, &y).map_err(err)
}

/// Paired approximate randomization test on predicted labels (accuracy)
/// or positive-class scores (auroc). Returns the result as a dict.
#[pyfunction]
#[pyo3(signature = (a, b, truth, metric = "accuracy", shuffles = stats::DEFAULT_SHUFFLES, seed = 0, n_hypotheses = 1))]
#[allow(clippy::too_many_arguments)]
fn approx_randomization_test<'py>(
    py: Python<'py>,
    a: Vec<f64>,
    b: Vec<f64>,
    truth: Vec<usize>,
    metric: &str,
    shuffles: usize,
    seed: u64,
    n_hypotheses: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let outcomes = stats::PairedOutcomes::new(a, b, truth).map_err(err)?;
    let result = match metric {
        "accuracy" => stats::approx_randomization_test(
            &outcomes,
            metric,
            |p: &[f64], y: &[usize]| {
                let pred: Vec<usize> = p.iter().map(|&v| v as usize).collect();
                classifier::accuracy(&pred, y)
            },
            shuffles,
            seed,
            n_hypotheses,
        ),
        "auroc" => stats::approx_randomization_test(&outcomes, metric, classifier::auroc, shuffles, seed, n_hypotheses),
        other => return Err(PyValueError::new_err(format!("unknown metric {other:?}"))),
    }
    .map_err(err)?;
    to_py(py, &result)
}

/// Runs the command-line front end; returns its exit status.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("patient-repr".to_string()).chain(args).collect();
    py.detach(|| patient_repr::cli::run_command(argv))
}

#[pymodule]
#[pyo3(name = "patient_repr")]
fn patient_repr_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Features>()?;
    m.add_class::<Sdae>()?;
    m.add_class::<Doc2vec>()?;
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(feature_significance, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_feature_scores, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(cohens_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(approx_randomization_test, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
