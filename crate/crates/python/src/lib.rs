//! Python bindings for `osr-core`.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use osr_core::config::{PipelineConfig, Preset};
use osr_core::eval::{self, ClassPools, LabeledScore, Protocol};
use osr_core::llm::parse;
use osr_core::llm::prompts::{PromptTemplates, TemplateId};
use osr_core::model::{ClassLabel, ClassRegistry, Origin};
use osr_core::pipeline::{resolve_splits, Pipeline};
use osr_core::scoring::{self, ScoringConfig};

create_exception!(osr_py, OsrError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    OsrError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn canonicalize(name: &str) -> PyResult<String> {
    osr_core::canonicalize(name).map_err(err)
}

/// Ordered class list: closed classes first, then virtual ones.
#[pyclass(name = "ClassRegistry", module = "osr_py")]
struct PyRegistry {
    inner: ClassRegistry,
}

#[pymethods]
impl PyRegistry {
    #[new]
    fn new(closed: Vec<String>) -> PyResult<Self> {
        Ok(PyRegistry {
            inner: ClassRegistry::from_closed(&closed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyRegistry {
            inner: ClassRegistry::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    /// Appends virtual classes; returns the names dropped as duplicates.
    #[pyo3(signature = (names, dissimilar = false))]
    fn append(&mut self, names: Vec<String>, dissimilar: bool) -> PyResult<Vec<String>> {
        let origin = if dissimilar {
            Origin::VirtualDissimilar
        } else {
            Origin::VirtualSimilar
        };
        let labels = names
            .iter()
            .map(|n| ClassLabel::new(n, origin))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        Ok(self.inner.append(labels))
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().into_iter().map(String::from).collect()
    }

    fn origins(&self) -> Vec<String> {
        self.inner
            .classes()
            .iter()
            .map(|c| match c.origin() {
                Origin::Closed => "closed",
                Origin::VirtualSimilar => "virtual_similar",
                Origin::VirtualDissimilar => "virtual_dissimilar",
            })
            .map(String::from)
            .collect()
    }

    #[getter]
    fn closed_count(&self) -> usize {
        self.inner.closed_count()
    }

    fn index_of(&self, name: &str) -> PyResult<Option<usize>> {
        let canonical = osr_core::canonicalize(name).map_err(err)?;
        Ok(self.inner.index_of(&canonical))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("ClassRegistry({:?})", self.inner.names())
    }
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    scoring::softmax(&logits).map_err(err)
}

/// Returns a dict with `p_inc`, `score`, `predicted_index` and `predicted_closed_class`.
#[pyfunction]
#[pyo3(signature = (p_clip, p_dino, registry, alpha = 0.6))]
fn fuse_and_score<'py>(
    py: Python<'py>,
    p_clip: Vec<f64>,
    p_dino: Vec<f64>,
    registry: &PyRegistry,
    alpha: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ScoringConfig {
        alpha,
        ..Default::default()
    };
    cfg.validate().map_err(err)?;
    let out = scoring::fuse_and_score(&p_clip, &p_dino, &registry.inner, &cfg).map_err(err)?;
    to_py(py, &out)
}

fn rows(
    scores: &[f64],
    is_closed: &[bool],
    correct: Option<&[bool]>,
) -> PyResult<Vec<LabeledScore>> {
    if scores.len() != is_closed.len() || correct.is_some_and(|c| c.len() != scores.len()) {
        return Err(err("scores, is_closed and correct must have equal lengths"));
    }
    Ok(scores
        .iter()
        .zip(is_closed)
        .enumerate()
        .map(|(i, (&s, &closed))| {
            let ok = closed && correct.is_none_or(|c| c[i]);
            LabeledScore {
                image_id: i.to_string(),
                is_closed: closed,
                true_class: closed.then(|| "c".to_string()),
                score: s,
                predicted_closed_class: if ok { "c" } else { "x" }.to_string(),
            }
        })
        .collect())
}

#[pyfunction]
fn auroc(scores: Vec<f64>, is_closed: Vec<bool>) -> PyResult<f64> {
    eval::auroc(&rows(&scores, &is_closed, None)?).map_err(err)
}

/// `correct[i]` marks closed rows whose predicted class is right; open rows ignore it.
#[pyfunction]
fn oscr(scores: Vec<f64>, is_closed: Vec<bool>, correct: Vec<bool>) -> PyResult<f64> {
    eval::oscr(&rows(&scores, &is_closed, Some(&correct))?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (protocol, primary, secondary = Vec::new(), seed = 0))]
fn make_splits<'py>(
    py: Python<'py>,
    protocol: &str,
    primary: Vec<String>,
    secondary: Vec<String>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let protocol: Protocol = protocol.parse().map_err(err)?;
    let splits =
        eval::make_splits(protocol, &ClassPools { primary, secondary }, seed).map_err(err)?;
    to_py(py, &splits)
}

fn template_id(name: &str) -> PyResult<TemplateId> {
    TemplateId::ALL
        .into_iter()
        .find(|t| t.as_str() == name)
        .ok_or_else(|| err(format!("unknown template {name:?}")))
}

#[pyfunction]
fn template_names() -> Vec<&'static str> {
    TemplateId::ALL.iter().map(|t| t.as_str()).collect()
}

/// Renders a default question template with the given placeholder bindings.
#[pyfunction]
fn render_prompt(name: &str, bindings: HashMap<String, String>) -> PyResult<String> {
    let pairs: Vec<(&str, &str)> = bindings
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    PromptTemplates::default()
        .render(template_id(name)?, &pairs)
        .map_err(err)
}

/// New class names in an answer, minus those already in `registry`.
#[pyfunction]
fn parse_class_list(answer: &str, registry: &PyRegistry) -> Vec<String> {
    parse::parse_class_list(answer, &registry.inner)
        .into_iter()
        .map(|c| c.name().to_string())
        .collect()
}

#[pyfunction]
fn parse_numbered_items(answer: &str) -> Vec<String> {
    parse::parse_numbered_items(answer)
}

/// Runs every split described by a TOML config and returns the metrics report.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir = None, preset = None))]
fn evaluate<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    out_dir: Option<PathBuf>,
    preset: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = PipelineConfig::load(&config_path).map_err(err)?;
    cfg.apply_env();
    if let Some(out) = out_dir {
        cfg.out_dir = out;
    }
    let label = match preset {
        Some(p) => {
            let p: Preset = p.parse().map_err(err)?;
            cfg = cfg.with_preset(p);
            p.as_str()
        }
        None => "full",
    };
    cfg.validate().map_err(err)?;
    let report = py
        .detach(|| -> osr_core::Result<_> {
            let backends = cfg.build_backends()?;
            let pipeline = Pipeline::new(&cfg, &backends)?;
            let (manifest, splits) = resolve_splits(&cfg)?;
            pipeline.run_protocol(&manifest, &splits, &cfg.out_dir, label, false)
        })
        .map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn osr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OsrError", m.py().get_type::<OsrError>())?;
    m.add_class::<PyRegistry>()?;
    m.add_function(wrap_pyfunction!(canonicalize, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_and_score, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(oscr, m)?)?;
    m.add_function(wrap_pyfunction!(make_splits, m)?)?;
    m.add_function(wrap_pyfunction!(template_names, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_class_list, m)?)?;
    m.add_function(wrap_pyfunction!(parse_numbered_items, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
