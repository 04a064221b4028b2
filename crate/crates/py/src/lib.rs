//! Python bindings: text normalization, tokenization, emotion extraction,
//! feature closeness, metrics, the Friedman test and trained models.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use stance_core::affect::{self, Emotion, EmotionLexicon};
use stance_core::data;
use stance_core::embedding::{EmbeddingStore, HashTokenizer};
use stance_core::eval;
use stance_core::fusion::argmax;
use stance_core::model::{self, Provider};
use stance_core::tensor::Tensor;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Replace URLs and mentions with placeholders, strip symbols, collapse
/// whitespace.
#[pyfunction]
fn normalize_text(text: &str) -> String {
    data::normalize_text(text)
}

/// Hashed token ids and validity mask, padded or truncated to `max_len`.
#[pyfunction]
#[pyo3(signature = (text, max_len, vocab_bits = 15))]
fn tokenize(text: &str, max_len: usize, vocab_bits: u32) -> PyResult<(Vec<usize>, Vec<bool>)> {
    if !(2..=24).contains(&vocab_bits) {
        return Err(value_err(format!("vocab_bits {vocab_bits} outside 2..=24")));
    }
    let t = HashTokenizer::new(vocab_bits).tokenize(text, max_len);
    Ok((t.ids, t.mask))
}

/// Word to emotion associations.
#[pyclass(name = "Lexicon")]
struct Lexicon {
    inner: EmotionLexicon,
}

#[pymethods]
impl Lexicon {
    /// Builds a lexicon from `{word: [emotion, ...]}`.
    #[new]
    fn new(entries: HashMap<String, Vec<String>>) -> PyResult<Self> {
        let mut inner = EmotionLexicon::new();
        for (word, emotions) in entries {
            for e in emotions {
                inner.insert(&word, e.parse::<Emotion>().map_err(value_err)?);
            }
        }
        Ok(Self { inner })
    }

    /// Reads a tab-separated `word, emotion, flag` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        EmotionLexicon::load(&path)
            .map(|inner| Self { inner })
            .map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
    }

    fn emotions(&self, word: &str) -> Vec<&'static str> {
        self.inner.emotions(word).iter().map(|e| e.name()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Top-`k` emotions of `text` as `(name, share)` pairs.
#[pyfunction]
#[pyo3(signature = (text, lexicon, k = 3))]
fn extract_emotions(text: &str, lexicon: &Lexicon, k: usize) -> Vec<(&'static str, f64)> {
    affect::extract_emotions(text, &lexicon.inner, k)
        .entries
        .into_iter()
        .map(|(e, s)| (e.name(), s))
        .collect()
}

/// Unit-normalized absolute difference; zeros when the inputs are equal.
#[pyfunction]
fn closeness(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    affect::feature_closeness(&Tensor::vector(a), &Tensor::vector(b))
        .map(Tensor::into_data)
        .map_err(value_err)
}

/// Elementwise absolute difference.
#[pyfunction]
fn divergence(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    affect::emotion_divergence(&Tensor::vector(a), &Tensor::vector(b))
        .map(Tensor::into_data)
        .map_err(value_err)
}

/// Accuracy, per-label and macro precision/recall/F1 and the confusion
/// matrix (rows are true labels).
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    preds: Vec<usize>,
    truths: Vec<usize>,
    labels: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let cm = eval::confusion(&preds, &truths, labels.len()).map_err(value_err)?;
    let r = eval::macro_metrics(&cm, &labels);
    let out = PyDict::new(py);
    out.set_item("n", r.n)?;
    out.set_item("accuracy", r.accuracy)?;
    let macro_avg = PyDict::new(py);
    macro_avg.set_item("precision", r.macro_avg.precision)?;
    macro_avg.set_item("recall", r.macro_avg.recall)?;
    macro_avg.set_item("f1", r.macro_avg.f1)?;
    out.set_item("macro", macro_avg)?;
    let per_label = PyDict::new(py);
    for m in &r.per_label {
        per_label.set_item(&m.label, (m.precision, m.recall, m.f1, m.support))?;
    }
    out.set_item("per_label", per_label)?;
    out.set_item("confusion", r.confusion)?;
    Ok(out)
}

/// Friedman test over `scores[block][treatment]`; returns
/// `(statistic, p_value, df)`.
#[pyfunction]
fn friedman(scores: Vec<Vec<f64>>) -> PyResult<(f64, f64, usize)> {
    let r = eval::friedman(&scores).map_err(value_err)?;
    Ok((r.statistic, r.p_value, r.df))
}

/// A trained checkpoint ready for inference.
#[pyclass(name = "Model")]
struct Model {
    inner: model::Model,
    store: Option<EmbeddingStore>,
    lexicon: EmotionLexicon,
}

#[pymethods]
impl Model {
    /// Loads a checkpoint and its configuration sidecar, plus the embedding
    /// file and lexicon the configuration names.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = model::Model::load(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        let store = match &inner.config.provider {
            Provider::Toy { .. } => None,
            Provider::File { path } => Some(
                EmbeddingStore::load(path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?,
            ),
        };
        let lexicon = inner.config.load_lexicon().map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner, store, lexicon })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.names().to_vec()
    }

    /// Label, per-label probabilities and both emotion profiles for one
    /// pair. File-provider models need the record `id`.
    #[pyo3(signature = (source, reply, id = None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        source: &str,
        reply: &str,
        id: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (s, r) = (data::normalize_text(source), data::normalize_text(reply));
        if s.is_empty() || r.is_empty() {
            return Err(value_err("source and reply must be non-empty after normalization"));
        }
        let id = match (&self.store, id) {
            (Some(_), None) => return Err(value_err("file-provider models need an id")),
            (_, Some(id)) => id,
            (None, None) => "input",
        };
        let pair = self
            .inner
            .prepare(id, &s, &r, &self.lexicon, self.store.as_ref())
            .map_err(value_err)?;
        let probs = self
            .inner
            .predict(std::slice::from_ref(&pair))
            .map_err(value_err)?
            .remove(0);
        let out = PyDict::new(py);
        out.set_item("label", self.inner.labels.name(argmax(&probs)))?;
        let p = PyDict::new(py);
        for (name, v) in self.inner.labels.names().iter().zip(&probs) {
            p.set_item(name, v)?;
        }
        out.set_item("probabilities", p)?;
        let profile = |t: &model::PreparedText| -> Vec<(&'static str, f64)> {
            t.emotions.entries.iter().map(|(e, s)| (e.name(), *s)).collect()
        };
        out.set_item("source_emotions", profile(&pair.source))?;
        out.set_item("reply_emotions", profile(&pair.reply))?;
        Ok(out)
    }
}

#[pymodule]
fn stance_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(extract_emotions, m)?)?;
    m.add_function(wrap_pyfunction!(closeness, m)?)?;
    m.add_function(wrap_pyfunction!(divergence, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(friedman, m)?)?;
    m.add_class::<Lexicon>()?;
    m.add_class::<Model>()?;
    Ok(())
}
