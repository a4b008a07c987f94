//! Python bindings for the smmini pipeline: records, prompts, the byte
//! tokenizer, 4-bit quantization, the LoRA model, training, and evaluation.
//!
//! Configs and eval items cross the boundary as plain dicts (via `json`).

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::de::DeserializeOwned;
use serde::Serialize;

use smmini_core::corpus::{self, QARecord};
use smmini_core::eval::{self, EvalItem, ModelScorer, ReportRow};
use smmini_core::model::{self, Mode, ModelConfig, Parameters};
use smmini_core::promptkit::{self, PromptedExample};
use smmini_core::quant::{self, QuantMode, QuantizedTensor};
use smmini_core::trainer::{self, Checkpoint, OptimizerState, RngState, TrainConfig};

create_exception!(smmini, SmminiError, PyException);

fn err(e: smmini_core::Error) -> PyErr {
    SmminiError::new_err(e.to_string())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let text: String = match obj {
        Some(d) => py.import("json")?.call_method1("dumps", (d,))?.extract()?,
        None => "{}".into(),
    };
    serde_json::from_str(&text).map_err(|e| SmminiError::new_err(e.to_string()))
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| SmminiError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn quant_mode(name: &str) -> PyResult<QuantMode> {
    match name {
        "absmax-int4" | "absmax" => Ok(QuantMode::AbsmaxInt4),
        "nf4" => Ok(QuantMode::Nf4),
        other => Err(SmminiError::new_err(format!("unknown quantization mode {other:?}"))),
    }
}

/// A normalized (context, question, answer) triple.
#[pyclass(name = "Record", frozen, from_py_object)]
#[derive(Clone)]
struct PyRecord(QARecord);

#[pymethods]
impl PyRecord {
    #[new]
    #[pyo3(signature = (question, answer, context = String::new(), source_tag = "python".to_string()))]
    fn new(question: String, answer: String, context: String, source_tag: String) -> PyResult<Self> {
        corpus::normalize(QARecord::new(source_tag, context, question, answer))
            .map(PyRecord)
            .map_err(err)
    }

    #[getter]
    fn source_tag(&self) -> &str {
        &self.0.source_tag
    }
    #[getter]
    fn context(&self) -> &str {
        &self.0.context
    }
    #[getter]
    fn question(&self) -> &str {
        &self.0.question
    }
    #[getter]
    fn answer(&self) -> &str {
        &self.0.answer
    }
    #[getter]
    fn record_id(&self) -> &str {
        &self.0.record_id
    }

    fn __repr__(&self) -> String {
        format!("Record(question={:?}, answer={:?})", self.0.question, self.0.answer)
    }
}

/// Parse and normalize one JSONL line (instruction/input/output keys).
#[pyfunction]
#[pyo3(signature = (line, source_tag = "python"))]
fn parse_record(line: &str, source_tag: &str) -> PyResult<PyRecord> {
    corpus::parse_record(line, source_tag)
        .and_then(corpus::normalize)
        .map(PyRecord)
        .map_err(err)
}

#[pyclass(name = "Prompt", frozen, get_all)]
struct PyPrompt {
    prompt_text: String,
    full_text: String,
    /// Character offset of the answer in `full_text`.
    answer_start: usize,
}

impl From<PromptedExample> for PyPrompt {
    fn from(ex: PromptedExample) -> Self {
        PyPrompt {
            prompt_text: ex.prompt_text,
            full_text: ex.full_text,
            answer_start: ex.answer_start,
        }
    }
}

#[pyfunction]
fn render_prompt(record: &PyRecord) -> PyPrompt {
    promptkit::render_prompt(&record.0).into()
}

/// Byte-level token ids (0..=255) for `text`, without BOS/EOS.
#[pyfunction]
fn tokenize(text: &str) -> Vec<u32> {
    promptkit::tokenize(text).ids
}

/// Inverse of `tokenize`; special tokens are dropped.
#[pyfunction]
fn detokenize(ids: Vec<u32>) -> PyResult<String> {
    promptkit::detokenize(&ids).map_err(err)
}

/// A blockwise 4-bit tensor: one scale per block, one code per element.
#[pyclass(name = "QuantizedTensor", frozen)]
struct PyQuantized(QuantizedTensor);

#[pymethods]
impl PyQuantized {
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape.clone()
    }
    #[getter]
    fn block_size(&self) -> usize {
        self.0.block_size
    }
    #[getter]
    fn scales(&self) -> Vec<f64> {
        self.0.scales.clone()
    }
    #[getter]
    fn codes(&self) -> Vec<u8> {
        self.0.codes.clone()
    }

    fn dequantize(&self) -> PyResult<Vec<f64>> {
        self.0.dequantize_flat().map_err(err)
    }

    /// The packed binary form used inside checkpoints.
    fn encode<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.encode())
    }
}

#[pyfunction]
#[pyo3(signature = (values, block_size = quant::DEFAULT_BLOCK_SIZE, mode = "absmax-int4"))]
fn quantize(values: Vec<f64>, block_size: usize, mode: &str) -> PyResult<PyQuantized> {
    let shape = vec![values.len()];
    quant::quantize_flat(&values, shape, block_size, quant_mode(mode)?)
        .map(PyQuantized)
        .map_err(err)
}

#[pyfunction]
fn nf4_levels() -> Vec<f64> {
    quant::NF4_LEVELS.to_vec()
}

/// Decoder-only byte model with LoRA adapters on a frozen base.
#[pyclass(name = "Model")]
struct PyModel(Parameters);

#[pymethods]
impl PyModel {
    /// Fresh model; keyword arguments override model config fields.
    #[new]
    #[pyo3(signature = (seed = 0, **config))]
    fn new(py: Python<'_>, seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: ModelConfig = from_py(py, config)?;
        model::init_model(&cfg, seed).map(PyModel).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.config)
    }

    #[getter]
    fn n_trainable(&self) -> usize {
        self.0.n_trainable()
    }

    #[getter]
    fn is_quantized(&self) -> bool {
        self.0.is_quantized()
    }

    /// Logits, one row of `vocab_size` values per input token.
    fn forward(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let logits = model::forward(&self.0, &tokens, Mode::Eval, 0).map_err(err)?;
        Ok(logits.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Mean next-token cross-entropy over the positions where `mask` is set.
    fn loss(&self, tokens: Vec<u32>, targets: Vec<u32>, mask: Vec<bool>) -> PyResult<f64> {
        let logits = model::forward(&self.0, &tokens, Mode::Eval, 0).map_err(err)?;
        model::loss(&logits, &targets, &mask).map_err(err)
    }

    /// Replace every frozen matrix with its 4-bit form.
    #[pyo3(signature = (block_size = quant::DEFAULT_BLOCK_SIZE, mode = "absmax-int4"))]
    fn quantize_base(&mut self, block_size: usize, mode: &str) -> PyResult<()> {
        self.0.quantize_base(block_size, quant_mode(mode)?).map_err(err)
    }

    /// A copy with adapters folded into dense base weights.
    fn merge(&self) -> PyResult<PyModel> {
        self.0.merge_adapters().map(PyModel).map_err(err)
    }

    /// Save as a checkpoint at step 0 with fresh optimizer state.
    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint {
            model: self.0.config.clone(),
            train: TrainConfig::default(),
            optimizer: OptimizerState::new(self.0.trainables()),
            params: self.0.clone(),
            step: 0,
            rng: RngState { seed: 0, counter: 0 },
        };
        trainer::save_checkpoint(&path, &ckpt).map_err(err)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<PyModel> {
        trainer::load_checkpoint(&path).map(|c| PyModel(c.params)).map_err(err)
    }
}

/// Fine-tune the adapters of `model` on `records`. Keyword arguments override
/// train config fields. Returns the trained model and per-step losses.
#[pyfunction]
#[pyo3(signature = (model, records, **config))]
fn train(
    py: Python<'_>,
    model: &PyModel,
    records: Vec<PyRecord>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg: TrainConfig = from_py(py, config)?;
    let corpus = corpus::Corpus {
        records: records.into_iter().map(|r| r.0).collect(),
        manifest: Default::default(),
    };
    let params = model.0.clone();
    let (params, log) = py
        .detach(|| trainer::train(&corpus, params, cfg, |_| {}))
        .map_err(err)?;
    Ok((PyModel(params), log.iter().map(|m| m.loss).collect()))
}

/// Score multiple-choice items (dicts with `question`, `options`,
/// `answer_idx`, and optionally `context` and `dataset`).
#[pyfunction]
#[pyo3(signature = (model, items, label = "smmini"))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    items: Vec<Bound<'py, PyDict>>,
    label: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let items: Vec<EvalItem> = items.iter().map(|d| from_py(py, Some(d))).collect::<PyResult<_>>()?;
    let scorer = ModelScorer::new(&model.0).map_err(err)?;
    let ev = py.detach(|| eval::evaluate(&scorer, &items, label)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("accuracy", ev.row.accuracy())?;
    out.set_item("n_correct", ev.row.n_correct)?;
    out.set_item("n_items", ev.row.n_items)?;
    out.set_item("predictions", ev.predictions.iter().map(|p| p.predicted).collect::<Vec<_>>())?;
    Ok(out.into_any())
}

/// Render (model, dataset, accuracy) triples as a text table and TSV.
/// `fixture=True` prepends the published comparison rows.
#[pyfunction]
#[pyo3(signature = (rows = Vec::new(), fixture = false))]
fn render_report(rows: Vec<(String, String, String)>, fixture: bool) -> PyResult<(String, String)> {
    let mut all = if fixture { eval::comparison_fixture() } else { Vec::new() };
    for (m, d, acc) in &rows {
        all.push(ReportRow::published(m, d, acc).map_err(err)?);
    }
    let r = eval::render_report(&all).map_err(err)?;
    Ok((r.text, r.tsv))
}

/// Default model and train configs.
#[pyfunction]
fn default_configs<'py>(py: Python<'py>) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    Ok((to_py(py, &ModelConfig::default())?, to_py(py, &TrainConfig::default())?))
}

#[pymodule]
pub fn smmini(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SmminiError", m.py().get_type::<SmminiError>())?;
    m.add("BOS", promptkit::BOS)?;
    m.add("EOS", promptkit::EOS)?;
    m.add("PAD", promptkit::PAD)?;
    m.add("VOCAB_SIZE", promptkit::VOCAB_SIZE)?;
    m.add_class::<PyRecord>()?;
    m.add_class::<PyPrompt>()?;
    m.add_class::<PyQuantized>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(parse_record, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(nf4_levels, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(default_configs, m)?)?;
    Ok(())
}
