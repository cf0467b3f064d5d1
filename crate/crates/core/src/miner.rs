//! Free-form topic generation and exact-duplicate collapsing.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::embedding::{l2_norm, EmbeddingVector};
use crate::gateway::parse::{parse_topic_array, ParseError, RawTopic, TopicArrayOutput};
use crate::gateway::{Gateway, GatewayError, PromptDefaults, TemplateId};
use crate::io::normalize_whitespace;

/// Below this norm a weighted mean of unit vectors is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTopicAssignment {
    pub sample_id: String,
    pub topics: Vec<RawTopic>,
    pub irrelevant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub label: String,
    pub explanation: String,
    pub count: u64,
    pub embedding: EmbeddingVector,
    #[serde(default)]
    pub locked: bool,
}

impl TopicEntry {
    pub fn new(label: &str, explanation: &str, count: u64, embedding: EmbeddingVector) -> Self {
        Self {
            label: label.to_string(),
            explanation: explanation.to_string(),
            count,
            embedding,
            locked: false,
        }
    }

    /// Case- and whitespace-insensitive identity of (label, explanation).
    pub fn dedup_key(&self) -> (String, String) {
        topic_key(&self.label, &self.explanation)
    }
}

pub fn topic_key(label: &str, explanation: &str) -> (String, String) {
    (
        normalize_whitespace(label).to_lowercase(),
        normalize_whitespace(explanation).to_lowercase(),
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    Prefix { expected: String },
    EmptyDomain,
    WordLimit { words: usize, limit: usize },
    ExplanationLimit { words: usize, limit: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Prefix { expected } => write!(f, "label must start with {expected:?}"),
            Violation::EmptyDomain => write!(f, "label has nothing after the subject prefix"),
            Violation::WordLimit { words, limit } => write!(f, "related domain has {words} words (limit {limit})"),
            Violation::ExplanationLimit { words, limit } => {
                write!(f, "explanation has {words} words (limit {limit})")
            }
        }
    }
}

/// Whitespace tokens that still contain something after stripping
/// punctuation from both ends.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace()
        .filter(|tok| !tok.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).is_empty())
        .count()
}

pub fn normalize_topic_label(
    label: &str,
    explanation: &str,
    subject: &str,
    n: usize,
    m: usize,
) -> Result<(String, String), Vec<Violation>> {
    let label = normalize_whitespace(label);
    let explanation = normalize_whitespace(explanation);
    let prefix = format!("{subject}: ");
    let mut violations = Vec::new();
    match label.strip_prefix(&prefix) {
        None if label == format!("{subject}:") => violations.push(Violation::EmptyDomain),
        None => violations.push(Violation::Prefix { expected: prefix }),
        Some(domain) => {
            let words = word_count(domain);
            if words == 0 {
                violations.push(Violation::EmptyDomain);
            } else if words > n {
                violations.push(Violation::WordLimit { words, limit: n });
            }
        }
    }
    let words = word_count(&explanation);
    if words > m {
        violations.push(Violation::ExplanationLimit { words, limit: m });
    }
    if violations.is_empty() {
        Ok((label, explanation))
    } else {
        Err(violations)
    }
}

/// Like [`normalize_topic_label`], but first inserts or fixes the subject
/// prefix when that is the only problem.
pub fn repair_topic_label(
    label: &str,
    explanation: &str,
    defaults: &PromptDefaults,
) -> Result<(String, String), Vec<Violation>> {
    let PromptDefaults { subject, n, m } = defaults;
    let first = normalize_topic_label(label, explanation, subject, *n, *m);
    let Err(violations) = &first else {
        return first;
    };
    if !matches!(violations.as_slice(), [Violation::Prefix { .. }]) {
        return first;
    }
    let label = normalize_whitespace(label);
    let head = format!("{}:", subject.to_lowercase());
    let domain = if label.to_lowercase().starts_with(&head) {
        label[head.len()..].trim()
    } else {
        label.as_str()
    };
    normalize_topic_label(&format!("{subject}: {domain}"), explanation, subject, *n, *m)
}

/// Generates 1-3 topics for one sample.
///
/// Labels that cannot be repaired are dropped; if none survive the judge is
/// re-asked once, and a second failure is returned as an error.
pub fn generate_initial_topics(
    gateway: &Gateway,
    sample: &SampleRecord,
    defaults: &PromptDefaults,
) -> Result<RawTopicAssignment, GatewayError> {
    let req = gateway
        .request(TemplateId::InitialTopicGeneration)
        .var("text", sample.text.as_str())
        .with_defaults(defaults);
    let parsed = gateway.complete_parsed(&req, |raw| {
        let topics = match parse_topic_array(raw)? {
            TopicArrayOutput::Irrelevant => return Ok(None),
            TopicArrayOutput::Topics(topics) => topics,
        };
        let mut kept: Vec<RawTopic> = Vec::new();
        for t in topics {
            match repair_topic_label(&t.label, &t.explanation, defaults) {
                Ok((label, explanation)) => {
                    if !kept.iter().any(|k| topic_key(&k.label, &k.explanation) == topic_key(&label, &explanation)) {
                        kept.push(RawTopic { label, explanation });
                    }
                }
                Err(v) => log::info!("{}: dropping topic {:?}: {}", sample.sample_id, t.label, join(&v)),
            }
        }
        if kept.is_empty() {
            return Err(ParseError::Schema {
                raw: raw.to_string(),
                message: "no topic follows the naming format".into(),
            });
        }
        Ok(Some(kept))
    })?;
    Ok(match parsed {
        None => RawTopicAssignment {
            sample_id: sample.sample_id.clone(),
            topics: Vec::new(),
            irrelevant: true,
        },
        Some(topics) => RawTopicAssignment {
            sample_id: sample.sample_id.clone(),
            topics,
            irrelevant: false,
        },
    })
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningSummary {
    pub samples: usize,
    pub assigned: usize,
    pub irrelevant: usize,
    pub failed: Vec<String>,
}

/// Runs topic generation over `samples` (concurrently, results in input order).
/// Samples whose judge output stays unusable are reported as failed; backend
/// failures abort.
pub fn mine_samples(
    gateway: &Gateway,
    samples: &[SampleRecord],
    defaults: &PromptDefaults,
) -> Result<(Vec<RawTopicAssignment>, MiningSummary), GatewayError> {
    let results: Vec<Result<RawTopicAssignment, GatewayError>> = samples
        .par_iter()
        .map(|s| generate_initial_topics(gateway, s, defaults))
        .collect();
    let mut summary = MiningSummary {
        samples: samples.len(),
        ..MiningSummary::default()
    };
    let mut out = Vec::new();
    for (sample, result) in samples.iter().zip(results) {
        match result {
            Ok(a) => {
                if a.irrelevant {
                    summary.irrelevant += 1;
                } else {
                    summary.assigned += 1;
                }
                out.push(a);
            }
            Err(GatewayError::Parse(e)) => {
                log::warn!("{}: annotation failed: {e}", sample.sample_id);
                summary.failed.push(sample.sample_id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, summary))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbedInput {
    #[serde(rename = "label")]
    Label,
    #[default]
    #[serde(rename = "label+explanation")]
    LabelExplanation,
}

impl EmbedInput {
    pub fn text(self, label: &str, explanation: &str) -> String {
        match self {
            EmbedInput::Label => label.to_string(),
            EmbedInput::LabelExplanation => format!("{label}\n{explanation}"),
        }
    }
}

/// Count-weighted mean of unit vectors, renormalized. Falls back to
/// `fallback` when the mean nearly vanishes.
pub fn weighted_centroid<'a>(
    items: impl IntoIterator<Item = (u64, &'a EmbeddingVector)>,
    fallback: &EmbeddingVector,
) -> EmbeddingVector {
    let mut acc = vec![0.0; fallback.dim()];
    let mut total = 0u64;
    for (count, v) in items {
        assert_eq!(v.dim(), acc.len(), "embedding dimension mismatch");
        for (a, x) in acc.iter_mut().zip(v.as_slice()) {
            *a += count as f64 * x;
        }
        total += count;
    }
    for a in acc.iter_mut() {
        *a /= total.max(1) as f64;
    }
    if l2_norm(&acc) < DEGENERATE_NORM {
        log::warn!("weighted mean of embeddings is degenerate; keeping the anchor embedding");
        return fallback.clone();
    }
    EmbeddingVector::new(acc).unwrap_or_else(|| fallback.clone())
}

/// Merges entries sharing a normalized (label, explanation), keeping the
/// first surface form. Singletons pass through untouched.
pub fn collapse_duplicates(entries: Vec<TopicEntry>) -> Vec<TopicEntry> {
    let mut groups: Vec<Vec<TopicEntry>> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for e in entries {
        match index.get(&e.dedup_key()) {
            Some(&i) => groups[i].push(e),
            None => {
                index.insert(e.dedup_key(), groups.len());
                groups.push(vec![e]);
            }
        }
    }
    groups
        .into_iter()
        .map(|mut group| {
            if group.len() == 1 {
                return group.pop().expect("nonempty group");
            }
            let embedding = weighted_centroid(group.iter().map(|e| (e.count, &e.embedding)), &group[0].embedding);
            TopicEntry {
                label: group[0].label.clone(),
                explanation: group[0].explanation.clone(),
                count: group.iter().map(|e| e.count).sum(),
                embedding,
                locked: group.iter().any(|e| e.locked),
            }
        })
        .collect()
}

/// Counts topic occurrences across assignments, embeds each distinct
/// surface form once, and collapses duplicates.
pub fn build_topic_entries(
    gateway: &Gateway,
    assignments: &[RawTopicAssignment],
    input: EmbedInput,
) -> Result<Vec<TopicEntry>, GatewayError> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut counts: HashMap<(String, String), u64> = HashMap::new();
    for t in assignments.iter().filter(|a| !a.irrelevant).flat_map(|a| &a.topics) {
        let k = (t.label.clone(), t.explanation.clone());
        let c = counts.entry(k.clone()).or_insert(0);
        if *c == 0 {
            order.push(k);
        }
        *c += 1;
    }
    if order.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = order.iter().map(|(l, e)| input.text(l, e)).collect();
    let vectors = gateway.embed_batch(&texts)?;
    let entries = order
        .into_iter()
        .zip(vectors)
        .map(|((label, explanation), embedding)| {
            let count = counts[&(label.clone(), explanation.clone())];
            TopicEntry::new(&label, &explanation, count, embedding)
        })
        .collect();
    Ok(collapse_duplicates(entries))
}

/// Provenance written next to the mined topic list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningManifest {
    pub subject: String,
    pub n: usize,
    pub m: usize,
    pub generation_model: String,
    pub embedding_model: String,
    pub embed_input: EmbedInput,
    pub summary: MiningSummary,
    pub topics: usize,
    pub total_count: u64,
}

pub fn write_topics(path: &Path, topics: &[TopicEntry]) -> std::io::Result<()> {
    crate::io::write_jsonl_atomic(path, topics)
}

pub fn read_topics(path: &Path) -> std::io::Result<Vec<TopicEntry>> {
    crate::io::read_jsonl(path)
}
