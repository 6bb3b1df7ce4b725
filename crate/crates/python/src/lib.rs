//! Python bindings: vocabulary, formulas, the logic tracker, the text
//! checker, data generation and decoding with a trained checkpoint.

use std::collections::HashSet;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rule_exec::decoding::{example_tracker, DecodeConfig, Decoder};
use rule_exec::metrics::{self, SlackMode};
use rule_exec::neural::{load_checkpoint, AdamConfig};
use rule_exec::synth::{self, TaskSpec};
use rule_exec::train::{RunConfig, TrainOptions};
use rule_exec::{Formula, IncrementalTracker, TokenId, Tracker, Verdict};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (v.to_string(),))?.unbind())
}

fn verdict_json(v: &Verdict) -> serde_json::Value {
    serde_json::json!({ "satisfied": v.satisfied, "atoms": v.atoms })
}

#[pyclass(name = "Vocab", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVocab {
    inner: rule_exec::Vocab,
}

impl PyVocab {
    fn stops(&self) -> Arc<HashSet<TokenId>> {
        Arc::new(self.inner.stop_words().clone())
    }
}

#[pymethods]
impl PyVocab {
    #[new]
    #[pyo3(signature = (size = 64))]
    fn new(size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: rule_exec::Vocab::synthetic(size).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<TokenId>> {
        self.inner.encode(text).map_err(value_err)
    }

    fn decode(&self, ids: Vec<TokenId>) -> String {
        self.inner.decode(&ids)
    }

    fn id(&self, word: &str) -> PyResult<TokenId> {
        self.inner.id(word).map_err(value_err)
    }
}

#[pyclass(name = "Formula", frozen)]
struct PyFormula {
    inner: Formula,
    vocab: PyVocab,
}

#[pymethods]
impl PyFormula {
    #[new]
    fn new(expr: &str, vocab: &PyVocab) -> PyResult<Self> {
        Ok(Self {
            inner: Formula::parse(expr, &vocab.inner).map_err(value_err)?,
            vocab: vocab.clone(),
        })
    }

    fn render(&self) -> String {
        self.inner.render(&self.vocab.inner)
    }

    fn atoms(&self) -> Vec<String> {
        self.inner.atoms().iter().map(|a| a.render(&self.vocab.inner)).collect()
    }

    /// Truth of the formula under per-atom truth values.
    fn evaluate(&self, truth: Vec<bool>) -> PyResult<bool> {
        if truth.len() != self.inner.atoms().len() {
            return Err(PyValueError::new_err("one truth value per atom"));
        }
        Ok(self.inner.evaluate_indexed(&truth))
    }

    fn __repr__(&self) -> String {
        format!("Formula({:?})", self.render())
    }
}

/// Logic tracker for one formula and source; `compressed` selects the
/// merged flag layout used by the model.
#[pyclass(name = "Tracker", frozen)]
struct PyTracker {
    inner: Arc<Tracker>,
}

#[pymethods]
impl PyTracker {
    #[new]
    #[pyo3(signature = (formula, src = Vec::new(), compressed = false))]
    fn new(formula: &PyFormula, src: Vec<TokenId>, compressed: bool) -> Self {
        let t = Tracker::for_input(formula.inner.clone(), &src, &formula.vocab.inner, formula.vocab.stops());
        Self {
            inner: Arc::new(if compressed { t.compressed() } else { t }),
        }
    }

    #[getter]
    fn x(&self) -> Vec<TokenId> {
        self.inner.x().to_vec()
    }

    /// Rendered flags, one row per input token and one column per prefix.
    fn state_matrix(&self, y: Vec<TokenId>) -> Vec<Vec<String>> {
        self.inner.build_full_matrix(&y).render_grid()
    }

    fn final_satisfaction(&self, py: Python<'_>, y: Vec<TokenId>) -> PyResult<Py<PyAny>> {
        to_py(py, &verdict_json(&self.inner.final_satisfaction(&y)))
    }

    fn start(&self) -> PyIncremental {
        PyIncremental {
            inner: self.inner.start(),
        }
    }
}

#[pyclass(name = "IncrementalTracker")]
struct PyIncremental {
    inner: IncrementalTracker,
}

#[pymethods]
impl PyIncremental {
    fn push(&mut self, token: TokenId) {
        self.inner.push(token);
    }

    #[getter]
    fn ended(&self) -> bool {
        self.inner.ended()
    }

    fn state_matrix(&self) -> Vec<Vec<String>> {
        self.inner.matrix().render_grid()
    }

    fn verdict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &verdict_json(&self.inner.verdict()))
    }
}

/// Scores one output with the tracker-independent checker.
#[pyfunction]
#[pyo3(signature = (expr, hyp, src = Vec::new(), vocab = None))]
fn check(py: Python<'_>, expr: &str, hyp: Vec<TokenId>, src: Vec<TokenId>, vocab: Option<&PyVocab>) -> PyResult<Py<PyAny>> {
    let v = match vocab {
        Some(v) => v.inner.clone(),
        None => rule_exec::Vocab::synthetic(64).map_err(value_err)?,
    };
    let s = metrics::score_text(expr, &src, &hyp, &v).map_err(value_err)?;
    let atoms: Vec<serde_json::Value> = s
        .atoms
        .iter()
        .map(|a| serde_json::json!({ "template": a.template, "holds": a.holds, "slack": a.slack }))
        .collect();
    let out = serde_json::json!({
        "satisfied": s.satisfied(),
        "satisfied_pm1": s.satisfied_within(1, SlackMode::PerAtom),
        "truncated": s.truncated,
        "atoms": atoms,
    });
    to_py(py, &out)
}

/// Corpus metrics over `(expr, src, hyp)` triples.
#[pyfunction]
#[pyo3(signature = (items, vocab_size = 64, slack_mode = "per_atom"))]
fn evaluate(py: Python<'_>, items: Vec<(String, Vec<TokenId>, Vec<TokenId>)>, vocab_size: usize, slack_mode: &str) -> PyResult<Py<PyAny>> {
    let v = rule_exec::Vocab::synthetic(vocab_size).map_err(value_err)?;
    let mode: SlackMode = slack_mode.parse().map_err(value_err)?;
    let it = items.iter().map(|(e, s, h)| (e.as_str(), s.as_slice(), h.as_slice()));
    let report = metrics::evaluate(it, &v, mode).map_err(value_err)?;
    to_py(py, &serde_json::to_value(&report).map_err(value_err)?)
}

/// Generates train/dev/test splits from a task spec given as a JSON string.
#[pyfunction]
fn generate_data(py: Python<'_>, spec_json: &str) -> PyResult<Py<PyAny>> {
    let spec: TaskSpec = serde_json::from_str(spec_json).map_err(value_err)?;
    spec.validate().map_err(value_err)?;
    let s = synth::generate(&spec).map_err(value_err)?;
    let out = serde_json::json!({ "train": s.train, "dev": s.dev, "test": s.test });
    to_py(py, &out)
}

/// Generates data for the config's task and trains a model into `out_dir`.
/// `config_json` is merged over the defaults like a `--config` file.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir, threads = 1))]
fn train(py: Python<'_>, config_json: &str, out_dir: &str, threads: usize) -> PyResult<Py<PyAny>> {
    let dir = std::path::Path::new(out_dir);
    std::fs::create_dir_all(dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let cfg_path = dir.join("input_config.json");
    std::fs::write(&cfg_path, config_json).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let cfg = RunConfig::load(Some(&cfg_path), Vec::new()).map_err(value_err)?;
    let splits = synth::generate(&cfg.task).map_err(value_err)?;
    let (_, report) = py
        .detach(|| {
            let opts = TrainOptions {
                threads: threads.max(1),
                out_dir: Some(dir.to_path_buf()),
                resume: false,
                on_log: None,
            };
            rule_exec::train::train(&cfg, &splits.train, &splits.dev, opts)
        })
        .map_err(value_err)?;
    let out = serde_json::json!({
        "steps": report.steps,
        "losses": report.losses,
        "best_step": report.best_step,
        "best_dev_csr": report.best_csr,
    });
    to_py(py, &out)
}

/// A trained checkpoint ready for decoding.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    model: rule_exec::neural::Model,
    vocab: rule_exec::Vocab,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = load_checkpoint(path.as_ref(), AdamConfig::default()).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let vocab = rule_exec::Vocab::synthetic(ck.model.cfg.vocab_size).map_err(value_err)?;
        Ok(Self { model: ck.model, vocab })
    }

    #[getter]
    fn use_flags(&self) -> bool {
        self.model.cfg.use_flags
    }

    #[pyo3(signature = (expr, src = Vec::new(), beam = 1, max_len = 64))]
    fn decode(&self, py: Python<'_>, expr: &str, src: Vec<TokenId>, beam: usize, max_len: usize) -> PyResult<Py<PyAny>> {
        if beam == 0 || max_len == 0 {
            return Err(PyValueError::new_err("beam and max_len must be at least 1"));
        }
        let stops = Arc::new(self.vocab.stop_words().clone());
        let tr = example_tracker(expr, &src, &self.vocab, &stops).map_err(value_err)?;
        let cfg = DecodeConfig {
            beam_size: beam,
            max_len,
            ..DecodeConfig::default()
        };
        let h = Decoder::new(&self.model, cfg).decode(&tr).map_err(value_err)?;
        let out = serde_json::json!({
            "tokens": h.tokens,
            "text": self.vocab.decode(&h.tokens),
            "score": h.score,
            "satisfied": h.verdict.satisfied,
            "atoms": h.verdict.atoms,
        });
        to_py(py, &out)
    }
}

#[pymodule]
#[pyo3(name = "rule_exec")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyFormula>()?;
    m.add_class::<PyTracker>()?;
    m.add_class::<PyIncremental>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("EOS", rule_exec::EOS)?;
    m.add("SEP", rule_exec::SEP)?;
    Ok(())
}
