//! Python bindings: vocabulary, encoder, training, STS evaluation and the MI estimators.

use std::path::PathBuf;

use micse::checkpoint::Checkpoint;
use micse::config::RunConfig;
use micse::encoder::{Encoder, EncoderConfig, Mode};
use micse::eval::{embed, spearman as rank_corr, sts_eval, StsDataset};
use micse::losses::SliceSpec;
use micse::mistats::{gaussian_mi_closed, mi_estimate_binned, mi_estimate_knn, BivariateSample, DEFAULT_BINS, DEFAULT_K};
use micse::numerics::RngStream;
use micse::textio::{synth, TokenBatch};
use micse::trainer::{train as run_training, TrainConfig};
use micse::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Vocab", module = "micse_py")]
struct PyVocab {
    inner: micse::textio::Vocab,
}

#[pymethods]
impl PyVocab {
    #[new]
    #[pyo3(signature = (lines, min_freq = 1))]
    fn new(lines: Vec<String>, min_freq: usize) -> PyResult<Self> {
        let inner = micse::textio::Vocab::build(lines.iter().map(String::as_str), min_freq).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn id(&self, token: &str) -> usize {
        self.inner.id(token)
    }

    /// Token ids of one sentence (no `[CLS]`, no padding).
    fn encode(&self, sentence: &str) -> Vec<usize> {
        self.inner.encode(sentence)
    }
}

/// Transformer encoder. Holds reference-counted tensors, so it stays on the thread that made it.
#[pyclass(name = "Encoder", module = "micse_py", unsendable)]
struct PyEncoder {
    inner: Encoder,
    config: TrainConfig,
    step: usize,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (vocab_size, seed = 0, layers = 4, heads = 4, width = 64, ffn_width = 128, max_len = 32, embed_dim = 64, dropout = 0.1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        seed: u64,
        layers: usize,
        heads: usize,
        width: usize,
        ffn_width: usize,
        max_len: usize,
        embed_dim: usize,
        dropout: f64,
    ) -> PyResult<Self> {
        let encoder = EncoderConfig { layers, heads, width, ffn_width, max_len, embed_dim, vocab_size, dropout };
        let inner = Encoder::new(encoder.clone(), seed).map_err(py_err)?;
        let config = TrainConfig { encoder, slice: SliceSpec::upper_half(layers), seed, ..TrainConfig::toy() };
        Ok(Self { inner, config, step: 0 })
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.config().embed_dim
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().iter().map(|p| p.tensor.to_vec().len()).sum()
    }

    /// Eval-mode sentence embeddings.
    fn embed(&self, vocab: &PyVocab, sentences: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
        embed(&self.inner, &vocab.inner, &refs).map_err(py_err)
    }

    /// Attention weights of one sentence as `[layer][head][query][key]`, trimmed to its length.
    /// With `dropout_seed` set, the pass runs in training mode with that dropout stream.
    #[pyo3(signature = (vocab, sentence, dropout_seed = None))]
    fn attention(&self, vocab: &PyVocab, sentence: &str, dropout_seed: Option<u64>) -> PyResult<Vec<Vec<Vec<Vec<f64>>>>> {
        let batch = TokenBatch::tokenize(&[sentence], &vocab.inner, self.inner.config().max_len)
            .map_err(py_err)?
            .trimmed();
        let mode = dropout_seed.map_or(Mode::Eval, |s| Mode::Train(RngStream::new(s, 0)));
        let att = self.inner.encode(&batch, mode).map_err(py_err)?.attention;
        let (h, s, n) = (att.heads, att.seq_len, att.lengths[0]);
        Ok(att
            .layers
            .iter()
            .map(|layer| {
                let v = layer.value();
                (0..h)
                    .map(|head| (0..n).map(|q| (0..n).map(|k| v[(head * s + q) * s + k]).collect()).collect())
                    .collect()
            })
            .collect())
    }

    fn save(&self, path: PathBuf, vocab: &PyVocab) -> PyResult<()> {
        Checkpoint::from_encoder(&self.inner, &vocab.inner, self.step, self.config.to_meta()).save(&path).map_err(py_err)
    }

    /// Load a checkpoint; returns `(encoder, vocab)`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(PyEncoder, PyVocab)> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let inner = ck.to_encoder(false).map_err(py_err)?;
        let config = TrainConfig::from_meta(&ck.meta).unwrap_or_else(|| TrainConfig { encoder: ck.encoder.clone(), ..TrainConfig::toy() });
        Ok((PyEncoder { inner, config, step: ck.step }, PyVocab { inner: ck.vocab }))
    }
}

/// Train on `sentences`. `settings` takes the same keys as a run config file.
/// Returns the trained encoder and one dict of metrics per step.
#[pyfunction]
#[pyo3(signature = (sentences, vocab, settings = None))]
fn train<'py>(
    py: Python<'py>,
    sentences: Vec<String>,
    vocab: &PyVocab,
    settings: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyEncoder, Vec<Bound<'py, PyDict>>)> {
    let mut run = RunConfig::default();
    run.train.encoder.vocab_size = vocab.inner.len();
    if let Some(d) = settings {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            run.set(&key, &v.str()?.to_string(), None).map_err(py_err)?;
        }
    }
    run.finish().map_err(py_err)?;
    let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
    let out = run_training(&refs, &vocab.inner, &run.train, &mut |_| Ok(())).map_err(py_err)?;
    let mut metrics = Vec::with_capacity(out.metrics.len());
    for m in &out.metrics {
        let d = PyDict::new(py);
        d.set_item("step", m.step)?;
        d.set_item("total", m.total)?;
        d.set_item("infonce", m.infonce)?;
        d.set_item("ami", m.ami)?;
        d.set_item("mean_mi", m.mean_mi)?;
        d.set_item("skipped_tiles", m.skipped_tiles)?;
        d.set_item("queue_fill", m.queue_fill)?;
        d.set_item("grad_norm", m.grad_norm)?;
        d.set_item("lr", m.lr)?;
        d.set_item("param_norm", m.param_norm)?;
        metrics.push(d);
    }
    let step = run.train.steps;
    Ok((PyEncoder { inner: out.encoder, config: run.train, step }, metrics))
}

/// Spearman ρ of `encoder` on `(sentence1, sentence2, gold)` triples.
#[pyfunction]
fn evaluate(encoder: &PyEncoder, vocab: &PyVocab, pairs: Vec<(String, String, f64)>) -> PyResult<f64> {
    let data = StsDataset::from_triples(pairs).map_err(py_err)?;
    sts_eval(&encoder.inner, &vocab.inner, &data).map_err(py_err)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    rank_corr(&x, &y).map_err(py_err)
}

/// `−½ ln(1 − ρ²)` in nats.
#[pyfunction]
fn gaussian_mi(rho: f64) -> PyResult<f64> {
    gaussian_mi_closed(rho).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x, y, k = DEFAULT_K))]
fn mi_knn(x: Vec<f64>, y: Vec<f64>, k: usize) -> PyResult<f64> {
    let s = BivariateSample::new(x, y).map_err(py_err)?;
    Ok(mi_estimate_knn(&s, k).map_err(py_err)?.nats)
}

#[pyfunction]
#[pyo3(signature = (x, y, bins = DEFAULT_BINS))]
fn mi_binned(x: Vec<f64>, y: Vec<f64>, bins: usize) -> PyResult<f64> {
    let s = BivariateSample::new(x, y).map_err(py_err)?;
    Ok(mi_estimate_binned(&s, bins).map_err(py_err)?.nats)
}

#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn synth_corpus(n: usize, seed: u64) -> Vec<String> {
    synth::corpus(n, seed)
}

#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn synth_sts_pairs(n: usize, seed: u64) -> Vec<(String, String, f64)> {
    synth::sts_pairs(n, seed)
}

#[pymodule]
pub fn micse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_mi, m)?)?;
    m.add_function(wrap_pyfunction!(mi_knn, m)?)?;
    m.add_function(wrap_pyfunction!(mi_binned, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sts_pairs, m)?)?;
    Ok(())
}
