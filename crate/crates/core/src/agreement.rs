//! Multi-label agreement: Jaccard, Micro-F1, Cohen's kappa over binarized
//! (instance, label) decisions, and percentile bootstrap intervals.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{AnnotationRecord, Codebook, Dimension};

pub const DEFAULT_ROUNDS: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("no instances to score")]
    Empty,
    #[error("label {0:?} is not in the label universe")]
    OutsideUniverse(String),
    #[error("rows have different lengths: {0} vs {1}")]
    Shape(usize, usize),
    #[error("reading {path}: {message}")]
    Input { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<String>,
    pub labels_a: BTreeSet<String>,
    pub labels_b: BTreeSet<String>,
}

impl LabeledInstance {
    pub fn new<S: AsRef<str>>(sample_id: &str, a: &[S], b: &[S]) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            segment: None,
            labels_a: a.iter().map(|s| s.as_ref().to_string()).collect(),
            labels_b: b.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }
}

/// |a ∩ b| / |a ∪ b|; two empty sets count as full agreement.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn mean_jaccard<I: Borrow<LabeledInstance>>(instances: &[I]) -> Result<f64, AgreementError> {
    if instances.is_empty() {
        return Err(AgreementError::Empty);
    }
    let sum: f64 = instances
        .iter()
        .map(|i| {
            let i = i.borrow();
            jaccard(&i.labels_a, &i.labels_b)
        })
        .sum();
    Ok(sum / instances.len() as f64)
}

/// Pooled TP/FP/FN with `labels_b` as gold.
pub fn confusion<I: Borrow<LabeledInstance>>(instances: &[I]) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for i in instances {
        let i = i.borrow();
        let both = i.labels_a.intersection(&i.labels_b).count();
        tp += both;
        fp += i.labels_a.len() - both;
        fn_ += i.labels_b.len() - both;
    }
    (tp, fp, fn_)
}

pub fn micro_f1<I: Borrow<LabeledInstance>>(instances: &[I]) -> Result<f64, AgreementError> {
    if instances.is_empty() {
        return Err(AgreementError::Empty);
    }
    let (tp, fp, fn_) = confusion(instances);
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok((2 * tp) as f64 / denom as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1, so the value is a convention rather than a ratio.
    pub degenerate: bool,
}

/// Presence table over every (instance, label) pair: (both, only a, only b, neither).
pub fn presence_table<I: Borrow<LabeledInstance>>(
    instances: &[I],
    universe: &BTreeSet<String>,
) -> Result<[u64; 4], AgreementError> {
    let mut t = [0u64; 4];
    for inst in instances {
        let inst = inst.borrow();
        for l in inst.labels_a.iter().chain(&inst.labels_b) {
            if !universe.contains(l) {
                return Err(AgreementError::OutsideUniverse(l.clone()));
            }
        }
        for label in universe {
            let a = inst.labels_a.contains(label);
            let b = inst.labels_b.contains(label);
            t[match (a, b) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            }] += 1;
        }
    }
    Ok(t)
}

pub fn cohens_kappa_multilabel<I: Borrow<LabeledInstance>>(
    instances: &[I],
    universe: &BTreeSet<String>,
) -> Result<Kappa, AgreementError> {
    if instances.is_empty() || universe.is_empty() {
        return Err(AgreementError::Empty);
    }
    let [n11, n10, n01, n00] = presence_table(instances, universe)?;
    let n = (n11 + n10 + n01 + n00) as i128;
    let ra = (n11 + n10) as i128;
    let rb = (n11 + n01) as i128;
    let agree = (n11 + n00) as i128;
    // scaled by n^2 so the ratio is formed from exact integers
    let chance = ra * rb + (n - ra) * (n - rb);
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(Kappa {
            value: if agree == n { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (n * agree - chance) as f64 / denom as f64,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub rounds: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over instances. Resample `r` draws from its own
/// stream of a generator seeded with `seed`, so results do not depend on
/// thread scheduling.
pub fn bootstrap_ci<F>(
    metric: F,
    instances: &[LabeledInstance],
    rounds: usize,
    level: f64,
    seed: u64,
) -> Result<ConfidenceInterval, AgreementError>
where
    F: Fn(&[&LabeledInstance]) -> f64 + Sync,
{
    if instances.is_empty() || rounds == 0 {
        return Err(AgreementError::Empty);
    }
    let n = instances.len();
    let mut stats: Vec<f64> = (0..rounds)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let sample: Vec<&LabeledInstance> = (0..n).map(|_| &instances[rng.random_range(0..n)]).collect();
            metric(&sample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        lo: quantile(&stats, tail),
        hi: quantile(&stats, 1.0 - tail),
        level,
        rounds,
    })
}

/// Column-wise mean of equally shaped rows.
pub fn aggregate_report(rows: &[Vec<f64>]) -> Result<Vec<f64>, AgreementError> {
    let first = rows.first().ok_or(AgreementError::Empty)?;
    let mut sums = vec![0.0; first.len()];
    for row in rows {
        if row.len() != first.len() {
            return Err(AgreementError::Shape(first.len(), row.len()));
        }
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / rows.len() as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricWithCi {
    pub value: f64,
    pub ci: ConfidenceInterval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub instances: usize,
    pub jaccard: MetricWithCi,
    pub micro_f1: MetricWithCi,
    pub kappa: MetricWithCi,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// What the bootstrap resamples and which statistic each metric reports.
    pub method: String,
    pub seed: u64,
    pub overall: SegmentMetrics,
    pub segments: BTreeMap<String, SegmentMetrics>,
}

pub const METHOD_NOTE: &str = "instances resampled with replacement; jaccard is the mean per-instance score, \
micro_f1 pools TP/FP/FN with annotator B as gold, kappa binarizes every (instance, label) pair over the universe; \
percentile intervals";

fn segment_metrics(
    instances: &[LabeledInstance],
    universe: &BTreeSet<String>,
    rounds: usize,
    level: f64,
    seed: u64,
) -> Result<SegmentMetrics, AgreementError> {
    let mut flags = Vec::new();
    let vacuous = instances.iter().filter(|i| i.labels_a.is_empty() && i.labels_b.is_empty()).count();
    if vacuous > 0 {
        flags.push(format!("{vacuous} instance(s) with two empty label sets scored as Jaccard 1"));
    }
    let kappa = cohens_kappa_multilabel(instances, universe)?;
    if kappa.degenerate {
        flags.push("kappa undefined (constant annotations); reported by convention".into());
    }
    let kappa_of = |s: &[&LabeledInstance]| cohens_kappa_multilabel(s, universe).map(|k| k.value).unwrap_or(0.0);
    Ok(SegmentMetrics {
        instances: instances.len(),
        jaccard: MetricWithCi {
            value: mean_jaccard(instances)?,
            ci: bootstrap_ci(|s| mean_jaccard(s).unwrap_or(0.0), instances, rounds, level, seed)?,
        },
        micro_f1: MetricWithCi {
            value: micro_f1(instances)?,
            ci: bootstrap_ci(|s| micro_f1(s).unwrap_or(0.0), instances, rounds, level, seed)?,
        },
        kappa: MetricWithCi {
            value: kappa.value,
            ci: bootstrap_ci(kappa_of, instances, rounds, level, seed)?,
        },
        flags,
    })
}

/// Overall and per-segment metrics. Instances without a segment only count overall.
pub fn agreement_report(
    instances: &[LabeledInstance],
    universe: &BTreeSet<String>,
    rounds: usize,
    level: f64,
    seed: u64,
) -> Result<AgreementReport, AgreementError> {
    let overall = segment_metrics(instances, universe, rounds, level, seed)?;
    let mut by_segment: BTreeMap<String, Vec<LabeledInstance>> = BTreeMap::new();
    for inst in instances {
        if let Some(seg) = &inst.segment {
            by_segment.entry(seg.clone()).or_default().push(inst.clone());
        }
    }
    let segments = by_segment
        .into_iter()
        .map(|(seg, insts)| Ok((seg, segment_metrics(&insts, universe, rounds, level, seed)?)))
        .collect::<Result<_, AgreementError>>()?;
    Ok(AgreementReport {
        method: METHOD_NOTE.to_string(),
        seed,
        overall,
        segments,
    })
}

/// One line of an annotation file: either explicit `labels`, or a sample
/// record whose `annotations` hold the labels for the chosen dimension.
#[derive(Clone, Debug, Deserialize)]
struct AnnotationLine {
    sample_id: String,
    #[serde(default)]
    segment: Option<String>,
    #[serde(default)]
    dataset_id: Option<String>,
    #[serde(default)]
    labels: Option<Vec<String>>,
    #[serde(default)]
    annotations: Option<AnnotationRecord>,
}

fn input_err(path: &Path, message: impl ToString) -> AgreementError {
    AgreementError::Input {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn read_labels(path: &Path, dimension: Dimension) -> Result<Vec<(String, Option<String>, BTreeSet<String>)>, AgreementError> {
    let lines: Vec<AnnotationLine> = crate::io::read_jsonl(path).map_err(|e| input_err(path, e))?;
    lines
        .into_iter()
        .map(|l| {
            let labels = match (l.labels, &l.annotations) {
                (Some(labels), _) => labels,
                (None, Some(ann)) => ann.labels(dimension).map(<[String]>::to_vec).unwrap_or_default(),
                (None, None) => return Err(input_err(path, format!("{}: no labels", l.sample_id))),
            };
            Ok((l.sample_id, l.segment.or(l.dataset_id), labels.into_iter().collect()))
        })
        .collect()
}

/// Reads a universe file: a JSON array of codes, or a taxonomy codebook.
pub fn load_universe(path: &Path) -> Result<BTreeSet<String>, AgreementError> {
    let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    if let Ok(codes) = serde_json::from_str::<Vec<String>>(&text) {
        return Ok(codes.into_iter().collect());
    }
    let book = Codebook::from_json(&text).map_err(|e| input_err(path, e))?;
    Ok(book.entries().map(|e| e.code.clone()).collect())
}

/// Pairs annotator A and B files on sample id. Returns the instances (in A's
/// order) and the number of ids present in only one file.
pub fn load_instances(
    path_a: &Path,
    path_b: &Path,
    dimension: Dimension,
) -> Result<(Vec<LabeledInstance>, usize), AgreementError> {
    let a = read_labels(path_a, dimension)?;
    let b: HashMap<String, (Option<String>, BTreeSet<String>)> = read_labels(path_b, dimension)?
        .into_iter()
        .map(|(id, seg, l)| (id, (seg, l)))
        .collect();
    let a_len = a.len();
    let mut out = Vec::new();
    for (id, seg, labels_a) in a {
        if let Some((seg_b, labels_b)) = b.get(&id) {
            out.push(LabeledInstance {
                sample_id: id,
                segment: seg.or_else(|| seg_b.clone()),
                labels_a,
                labels_b: labels_b.clone(),
            });
        }
    }
    let unmatched = (a_len - out.len()) + (b.len() - out.len());
    Ok((out, unmatched))
}
