use std::collections::BTreeSet;
use std::path::PathBuf;

use corpusalign::agreement::{self, LabeledInstance};
use corpusalign::corpus::{self, Conversation, Role, SampleRecord};
use corpusalign::embedding::EmbeddingVector;
use corpusalign::gateway::{self, OutputSchema};
use corpusalign::miner::{self, TopicEntry};
use corpusalign::pipeline::{Pipeline, PipelineError, RunOptions, Stage};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_json<T: serde::de::DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| value_err(format!("unknown value {s:?}")))
}

/// Hands structured results to Python as plain dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

type Pair = (Vec<String>, Vec<String>);

fn instances(pairs: Vec<Pair>) -> Vec<LabeledInstance> {
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| LabeledInstance::new(&i.to_string(), &a, &b))
        .collect()
}

fn universe_of(universe: Option<Vec<String>>, inst: &[LabeledInstance]) -> BTreeSet<String> {
    match universe {
        Some(u) => u.into_iter().collect(),
        None => inst.iter().flat_map(|i| i.labels_a.iter().chain(&i.labels_b).cloned()).collect(),
    }
}

#[pyfunction]
fn rank_weights(k: usize) -> PyResult<Vec<f64>> {
    corpusalign::analysis::rank_weights(k).map_err(value_err)
}

/// Cosine similarity of two nonzero vectors.
#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(value_err("vectors differ in length"));
    }
    let (Some(a), Some(b)) = (EmbeddingVector::new(a), EmbeddingVector::new(b)) else {
        return Err(value_err("vectors must be nonzero and finite"));
    };
    Ok(a.cosine(&b))
}

#[pyfunction]
fn jaccard(a: Vec<String>, b: Vec<String>) -> f64 {
    agreement::jaccard(&a.into_iter().collect(), &b.into_iter().collect())
}

/// Pooled F1 over (annotator A labels, annotator B labels) pairs, B as gold.
#[pyfunction]
fn micro_f1(pairs: Vec<Pair>) -> PyResult<f64> {
    agreement::micro_f1(&instances(pairs)).map_err(value_err)
}

/// Returns (value, degenerate). The universe defaults to every label seen.
#[pyfunction]
#[pyo3(signature = (pairs, universe=None))]
fn kappa(pairs: Vec<Pair>, universe: Option<Vec<String>>) -> PyResult<(f64, bool)> {
    let inst = instances(pairs);
    let k = agreement::cohens_kappa_multilabel(&inst, &universe_of(universe, &inst)).map_err(value_err)?;
    Ok((k.value, k.degenerate))
}

/// Percentile interval (lo, hi) for "jaccard", "micro_f1" or "kappa".
#[pyfunction]
#[pyo3(signature = (pairs, metric="jaccard", rounds=1000, level=0.95, seed=0, universe=None))]
fn bootstrap(
    py: Python<'_>,
    pairs: Vec<Pair>,
    metric: &str,
    rounds: usize,
    level: f64,
    seed: u64,
    universe: Option<Vec<String>>,
) -> PyResult<(f64, f64)> {
    let inst = instances(pairs);
    let u = universe_of(universe, &inst);
    let f: Box<dyn Fn(&[&LabeledInstance]) -> f64 + Send + Sync> = match metric {
        "jaccard" => Box::new(|s| agreement::mean_jaccard(s).unwrap_or(0.0)),
        "micro_f1" => Box::new(|s| agreement::micro_f1(s).unwrap_or(0.0)),
        "kappa" => Box::new(move |s| agreement::cohens_kappa_multilabel(s, &u).map(|k| k.value).unwrap_or(0.0)),
        other => return Err(value_err(format!("unknown metric {other:?}"))),
    };
    let ci = py
        .detach(|| agreement::bootstrap_ci(f, &inst, rounds, level, seed))
        .map_err(value_err)?;
    Ok((ci.lo, ci.hi))
}

/// Normalized (label, explanation); raises ValueError listing every violation.
#[pyfunction]
#[pyo3(signature = (label, explanation, subject="Climate Change", n=4, m=20))]
fn normalize_topic_label(label: &str, explanation: &str, subject: &str, n: usize, m: usize) -> PyResult<(String, String)> {
    miner::normalize_topic_label(label, explanation, subject, n, m).map_err(|v| {
        let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
        value_err(msgs.join("; "))
    })
}

/// (mean, max) pairwise cosine over embeddings, or None below two.
#[pyfunction]
fn spread_stats(embeddings: Vec<Vec<f64>>) -> PyResult<Option<(f64, f64)>> {
    let topics = embeddings
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let e = EmbeddingVector::new(v).ok_or_else(|| value_err(format!("embedding {i} is zero or not finite")))?;
            Ok(TopicEntry::new("", "", 1, e))
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(corpusalign::merger::spread_stats(&topics).map(|s| (s.mean_pairwise_sim, s.max_pairwise_sim)))
}

/// Texts with whitespace-insensitive duplicates removed, first occurrence kept.
#[pyfunction]
fn dedup(texts: Vec<String>) -> Vec<String> {
    let samples: Vec<SampleRecord> = texts.iter().filter_map(|t| SampleRecord::new("py", t)).collect();
    corpus::deduplicate(samples).into_iter().map(|s| s.text).collect()
}

/// First user turn of a conversation given as (role, content) pairs.
#[pyfunction]
fn extract_first_turn(turns: Vec<(String, String)>) -> PyResult<String> {
    let pairs = turns
        .iter()
        .map(|(r, c)| Ok((from_json::<Role>(r)?, c.as_str())))
        .collect::<PyResult<Vec<_>>>()?;
    let conv = Conversation::from_pairs(&pairs);
    corpus::extract_first_turn(&conv).map(str::to_string).map_err(value_err)
}

/// Parses judge output for one of topic_array, merge_decision, reassign_array,
/// question_type_object.
#[pyfunction]
fn parse_structured_output<'py>(py: Python<'py>, raw: &str, schema: &str) -> PyResult<Bound<'py, PyAny>> {
    let schema: OutputSchema = from_json(schema)?;
    let out = gateway::parse_structured_output(raw, schema).map_err(value_err)?;
    to_py(py, &out)
}

/// Runs one stage (or "all") of a pipeline config and returns the stage reports.
#[pyfunction]
#[pyo3(signature = (config, stage, workdir=None, seed=None, dry_run=false))]
fn run_stage<'py>(
    py: Python<'py>,
    config: PathBuf,
    stage: &str,
    workdir: Option<PathBuf>,
    seed: Option<u64>,
    dry_run: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let options = RunOptions {
        workdir,
        seed,
        dry_run,
        ..Default::default()
    };
    let reports = py
        .detach(|| {
            let p = Pipeline::from_file(&config, options)?;
            let stages = if stage == "all" { p.all_stages() } else { vec![stage.parse::<Stage>().map_err(PipelineError::Config)?] };
            p.run(&stages)
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &reports)
}

#[pymodule]
fn _corpusalign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rank_weights, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(micro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(kappa, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_topic_label, m)?)?;
    m.add_function(wrap_pyfunction!(spread_stats, m)?)?;
    m.add_function(wrap_pyfunction!(dedup, m)?)?;
    m.add_function(wrap_pyfunction!(extract_first_turn, m)?)?;
    m.add_function(wrap_pyfunction!(parse_structured_output, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}
