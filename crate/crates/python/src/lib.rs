//! Python bindings: tokenizer, n-gram store, oracles, both decoders and the
//! speed-up metrics.

use std::sync::Mutex;

use ::anpd as core;
use core::decoder::{self, DecodeOptions};
use core::metrics;
use core::oracle::{self as oracle_mod, ModelOracle, OracleSpec};
use core::tokenizer::{self, Mode};
use core::TokenId;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyString};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Accepts `str` (UTF-8 encoded) or `bytes`.
fn text_bytes(obj: &Bound<'_, PyAny>) -> PyResult<Vec<u8>> {
    if let Ok(s) = obj.cast::<PyString>() {
        return Ok(s.to_str()?.as_bytes().to_vec());
    }
    if let Ok(b) = obj.cast::<PyBytes>() {
        return Ok(b.as_bytes().to_vec());
    }
    Err(PyValueError::new_err("expected str or bytes"))
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    mode.parse().map_err(value_err)
}

#[pyclass(name = "Vocab", module = "anpd_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVocab {
    inner: tokenizer::Vocab,
}

#[pymethods]
impl PyVocab {
    /// Every byte plus eos.
    #[staticmethod]
    fn byte_level() -> Self {
        Self {
            inner: tokenizer::Vocab::byte_level(),
        }
    }

    #[staticmethod]
    fn from_words(corpus: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(Self {
            inner: tokenizer::Vocab::from_words(&text_bytes(corpus)?),
        })
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self {
            inner: tokenizer::Vocab::from_json(s).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn eos(&self) -> Option<TokenId> {
        self.inner.eos()
    }

    fn token<'py>(&self, py: Python<'py>, id: TokenId) -> Option<Bound<'py, PyBytes>> {
        self.inner.token(id).map(|t| PyBytes::new(py, t))
    }

    fn id_of(&self, token: &Bound<'_, PyAny>) -> PyResult<Option<TokenId>> {
        Ok(self.inner.id_of(&text_bytes(token)?))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Vocab(len={}, eos={:?})", self.inner.len(), self.inner.eos())
    }
}

fn vocab_or_bytes(vocab: Option<&PyVocab>) -> tokenizer::Vocab {
    vocab.map_or_else(tokenizer::Vocab::byte_level, |v| v.inner.clone())
}

#[pyfunction]
#[pyo3(signature = (text, vocab=None, mode="byte"))]
fn encode(text: &Bound<'_, PyAny>, vocab: Option<&PyVocab>, mode: &str) -> PyResult<Vec<TokenId>> {
    let mode = parse_mode(mode)?;
    Ok(tokenizer::encode(&text_bytes(text)?, &vocab_or_bytes(vocab), mode))
}

#[pyfunction]
#[pyo3(signature = (ids, vocab=None))]
fn decode<'py>(py: Python<'py>, ids: Vec<TokenId>, vocab: Option<&PyVocab>) -> PyResult<Bound<'py, PyBytes>> {
    let bytes = tokenizer::decode(&ids, &vocab_or_bytes(vocab)).map_err(value_err)?;
    Ok(PyBytes::new(py, &bytes))
}

#[pyfunction]
fn train_bpe(corpus: &Bound<'_, PyAny>, target_vocab_size: usize) -> PyResult<PyVocab> {
    Ok(PyVocab {
        inner: tokenizer::train_bpe(&text_bytes(corpus)?, target_vocab_size).map_err(value_err)?,
    })
}

/// `(word_count, token_count, ratio)`.
#[pyfunction]
#[pyo3(signature = (corpus, vocab=None, mode="byte"))]
fn corpus_stats(corpus: &Bound<'_, PyAny>, vocab: Option<&PyVocab>, mode: &str) -> PyResult<(usize, usize, f64)> {
    let s = tokenizer::corpus_stats(&text_bytes(corpus)?, &vocab_or_bytes(vocab), parse_mode(mode)?);
    Ok((s.word_count, s.token_count, s.ratio))
}

#[pyclass(name = "NgramStore", module = "anpd_py")]
struct PyNgramStore {
    inner: core::MultiLevelNgram,
}

#[pymethods]
impl PyNgramStore {
    #[new]
    #[pyo3(signature = (token_ids, n_max, runtime_update=true))]
    fn new(token_ids: Vec<TokenId>, n_max: usize, runtime_update: bool) -> PyResult<Self> {
        let inner = core::MultiLevelNgram::initialize(&token_ids, n_max)
            .map_err(value_err)?
            .with_runtime_update(runtime_update);
        Ok(Self { inner })
    }

    fn update(&mut self, token: TokenId) {
        self.inner.update(token);
    }

    /// Most likely next token after `context` at order `n`.
    fn query(&self, context: Vec<TokenId>, n: usize) -> PyResult<Option<TokenId>> {
        self.inner.query(&context, n).map_err(value_err)
    }

    /// `(token, order, count)` from the highest order that matches, or None.
    fn query_multilevel(&self, context_tail: Vec<TokenId>) -> Option<(TokenId, usize, u64)> {
        self.inner
            .query_multilevel(&context_tail)
            .map(|h| (h.token, h.level_n, h.count))
    }

    fn count_of(&self, n: usize, context: Vec<TokenId>, next: TokenId) -> PyResult<u64> {
        self.inner.count_of(n, &context, next).map_err(value_err)
    }

    #[getter]
    fn n_max(&self) -> usize {
        self.inner.n_max()
    }

    #[getter]
    fn committed(&self) -> Vec<TokenId> {
        self.inner.committed().to_vec()
    }

    fn snapshot_json(&self) -> String {
        self.inner.snapshot().to_json()
    }
}

/// A model stand-in. Build one with `Oracle.replay`, `Oracle.markov` or
/// `Oracle.external`.
#[pyclass(name = "Oracle", module = "anpd_py")]
struct PyOracle {
    spec: OracleSpec,
    inner: Mutex<Box<dyn ModelOracle + Send>>,
}

impl PyOracle {
    fn from_spec(spec: OracleSpec) -> PyResult<Self> {
        let inner = spec.build().map_err(runtime_err)?;
        Ok(Self {
            spec,
            inner: Mutex::new(inner),
        })
    }

    fn with<T>(&self, f: impl FnOnce(&mut dyn ModelOracle) -> T) -> T {
        let mut guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        f(guard.as_mut())
    }
}

#[pymethods]
impl PyOracle {
    /// Teacher-forced oracle: predicts the prompt, then `target`, then eos.
    #[staticmethod]
    fn replay(prompt: Vec<TokenId>, target: Vec<TokenId>, eos: TokenId) -> PyResult<Self> {
        Self::from_spec(OracleSpec::Replay { prompt, target, eos })
    }

    /// Deterministic count-argmax Markov model trained on `corpus`.
    #[staticmethod]
    #[pyo3(signature = (corpus, order, seed=0, eos=None))]
    fn markov(corpus: Vec<TokenId>, order: usize, seed: u64, eos: Option<TokenId>) -> PyResult<Self> {
        Self::from_spec(OracleSpec::Markov {
            corpus,
            order,
            seed,
            eos,
        })
    }

    /// Connects to an oracle server at `host:port`.
    #[staticmethod]
    #[pyo3(signature = (endpoint, timeout_ms=None))]
    fn external(endpoint: String, timeout_ms: Option<u64>) -> PyResult<Self> {
        Self::from_spec(OracleSpec::External { endpoint, timeout_ms })
    }

    /// Appends `tokens` and returns one greedy prediction per token.
    fn extend(&self, py: Python<'_>, tokens: Vec<TokenId>) -> PyResult<Vec<TokenId>> {
        py.detach(|| self.with(|o| o.extend(&tokens))).map_err(runtime_err)
    }

    fn reset(&self) -> PyResult<()> {
        self.with(|o| o.reset()).map_err(runtime_err)
    }

    #[getter]
    fn consumed_len(&self) -> usize {
        self.with(|o| o.consumed_len())
    }

    #[getter]
    fn eos(&self) -> Option<TokenId> {
        self.with(|o| o.eos())
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.with(|o| o.vocab_size())
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.spec.kind()
    }

    /// A fresh oracle with the same configuration and an empty cache.
    fn fresh(&self) -> PyResult<Self> {
        Self::from_spec(self.spec.clone())
    }
}

#[pyclass(name = "CostModel", module = "anpd_py", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyCostModel {
    inner: oracle_mod::CostModel,
}

#[pymethods]
impl PyCostModel {
    #[new]
    #[pyo3(signature = (prefill_per_token=0.002, verify_base=1.0, verify_per_token=0.05))]
    fn new(prefill_per_token: f64, verify_base: f64, verify_per_token: f64) -> PyResult<Self> {
        let inner = oracle_mod::CostModel {
            prefill_per_token,
            verify_base,
            verify_per_token,
        };
        inner.validate().map_err(PyValueError::new_err)?;
        Ok(Self { inner })
    }

    /// One unit per verify call, free prefill.
    #[staticmethod]
    fn flat() -> Self {
        Self {
            inner: oracle_mod::CostModel::flat(),
        }
    }

    #[getter]
    fn prefill_per_token(&self) -> f64 {
        self.inner.prefill_per_token
    }
    #[getter]
    fn verify_base(&self) -> f64 {
        self.inner.verify_base
    }
    #[getter]
    fn verify_per_token(&self) -> f64 {
        self.inner.verify_per_token
    }
}

#[pyclass(name = "DecodeResult", module = "anpd_py", frozen)]
struct PyDecodeResult {
    inner: decoder::DecodeResult,
}

#[pymethods]
impl PyDecodeResult {
    #[getter]
    fn output(&self) -> Vec<TokenId> {
        self.inner.output.clone()
    }
    #[getter]
    fn prompt_len(&self) -> usize {
        self.inner.prompt_len
    }
    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.steps.len()
    }
    #[getter]
    fn llm_calls(&self) -> usize {
        self.inner.totals.llm_calls
    }
    #[getter]
    fn proposed_draft_tokens(&self) -> usize {
        self.inner.totals.proposed_draft_tokens
    }
    #[getter]
    fn accepted_draft_tokens(&self) -> usize {
        self.inner.totals.accepted_draft_tokens
    }
    #[getter]
    fn total_sim_time(&self) -> f64 {
        self.inner.total_sim_time()
    }

    /// Per-step records as dicts.
    fn steps<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .steps
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("step", s.step_index)?;
                d.set_item("drafted", s.drafted.clone())?;
                d.set_item("levels", s.draft_levels.clone())?;
                d.set_item("accepted", s.accepted_count)?;
                d.set_item("committed", s.committed_this_step.clone())?;
                d.set_item("batch", s.verify_batch_len)?;
                d.set_item("sim_time", s.sim_time)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "DecodeResult(output_len={}, steps={}, accepted={}/{})",
            self.inner.output.len(),
            self.inner.steps.len(),
            self.inner.totals.accepted_draft_tokens,
            self.inner.totals.proposed_draft_tokens
        )
    }
}

fn cost_or_default(cost: Option<&PyCostModel>) -> oracle_mod::CostModel {
    cost.map_or_else(oracle_mod::CostModel::default, |c| c.inner)
}

fn options(
    n: usize,
    k: usize,
    max_new_tokens: usize,
    runtime_update: bool,
    stop_at_eos: bool,
    fixed_level_only: bool,
) -> DecodeOptions {
    DecodeOptions {
        n_max: n,
        k_draft: k,
        max_new_tokens,
        runtime_update,
        stop_at_eos,
        fixed_level_only,
        max_contexts: None,
    }
}

/// Greedy decoding, one model call per token.
#[pyfunction]
#[pyo3(signature = (oracle, prompt, max_new_tokens=256, stop_at_eos=true, cost=None))]
fn baseline_decode(
    py: Python<'_>,
    oracle: &PyOracle,
    prompt: Vec<TokenId>,
    max_new_tokens: usize,
    stop_at_eos: bool,
    cost: Option<&PyCostModel>,
) -> PyResult<PyDecodeResult> {
    let opts = options(5, 7, max_new_tokens, true, stop_at_eos, false);
    let cost = cost_or_default(cost);
    let inner = py
        .detach(|| oracle.with(|o| decoder::baseline_decode(o, &prompt, &opts, &cost)))
        .map_err(runtime_err)?;
    Ok(PyDecodeResult { inner })
}

/// Draft/verify decoding with the adaptive n-gram drafter. The output is
/// identical to `baseline_decode` on the same oracle.
#[pyfunction]
#[pyo3(signature = (
    oracle, prompt, n=5, k=7, max_new_tokens=256, runtime_update=true,
    stop_at_eos=true, fixed_level_only=false, cost=None
))]
#[allow(clippy::too_many_arguments)]
fn anpd_decode(
    py: Python<'_>,
    oracle: &PyOracle,
    prompt: Vec<TokenId>,
    n: usize,
    k: usize,
    max_new_tokens: usize,
    runtime_update: bool,
    stop_at_eos: bool,
    fixed_level_only: bool,
    cost: Option<&PyCostModel>,
) -> PyResult<PyDecodeResult> {
    let opts = options(n, k, max_new_tokens, runtime_update, stop_at_eos, fixed_level_only);
    let cost = cost_or_default(cost);
    let inner = py
        .detach(|| oracle.with(|o| decoder::anpd_decode(o, &prompt, &opts, &cost)))
        .map_err(|e| match e {
            decoder::DecodeError::InvalidOptions(_) | decoder::DecodeError::EmptyPrompt => value_err(e),
            other => runtime_err(other),
        })?;
    Ok(PyDecodeResult { inner })
}

/// Hit ratio, speed-up and bound for one prompt, as a dict. Raises
/// ValueError if the outputs differ.
#[pyfunction]
#[pyo3(signature = (anpd, baseline, cost=None))]
fn compute_metrics<'py>(
    py: Python<'py>,
    anpd: &PyDecodeResult,
    baseline: &PyDecodeResult,
    cost: Option<&PyCostModel>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = metrics::compute_metrics(&anpd.inner, &baseline.inner, &cost_or_default(cost)).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("alpha", m.alpha)?;
    d.set_item("mean_committed_per_step", m.mean_committed_per_step)?;
    d.set_item("speedup_sim", m.speedup_sim)?;
    d.set_item("theoretical_bound", m.theoretical_bound)?;
    d.set_item("steps", m.steps)?;
    d.set_item("output_len", m.output_len)?;
    d.set_item("proposed_draft_tokens", m.proposed_draft_tokens)?;
    d.set_item("accepted_draft_tokens", m.accepted_draft_tokens)?;
    d.set_item("anpd_sim_time", m.anpd_sim_time)?;
    d.set_item("baseline_sim_time", m.baseline_sim_time)?;
    Ok(d)
}

/// `alpha * k + 1`.
#[pyfunction]
fn theoretical_bound(alpha: f64, k: usize) -> f64 {
    metrics::theoretical_bound(alpha, k)
}

/// One of the corpora shipped with the library.
#[pyfunction]
fn bundled_corpus(name: &str) -> PyResult<&'static str> {
    core::bundled::get(name).ok_or_else(|| PyValueError::new_err(format!("unknown bundled corpus {name:?}")))
}

#[pymodule]
fn anpd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("EOS_ID", tokenizer::EOS_ID)?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyNgramStore>()?;
    m.add_class::<PyOracle>()?;
    m.add_class::<PyCostModel>()?;
    m.add_class::<PyDecodeResult>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(train_bpe, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_stats, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_decode, m)?)?;
    m.add_function(wrap_pyfunction!(anpd_decode, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_bound, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_corpus, m)?)?;
    Ok(())
}
