//! Corpus ingestion, cleaning and persistence.
//!
//! A [`Store`] is a directory holding one JSONL shard per dataset plus a
//! `registry.json` listing every [`DatasetDescriptor`]. Samples are keyed by a
//! content hash, and deduplication uses the whitespace-normalized text within a
//! dataset, so re-ingesting the same file is a no-op.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::io::{normalize_whitespace, read_json, read_jsonl, sha256_hex, write_json_atomic, write_jsonl_atomic};
use crate::taxonomy::AnnotationRecord;

/// Fraction of malformed lines above which an ingest is treated as a format mismatch.
pub const MALFORMED_ABORT_FRACTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {malformed} of {total} lines malformed; file does not look like {format:?}")]
    FormatMismatch {
        path: PathBuf,
        format: IngestFormat,
        malformed: usize,
        total: usize,
    },
    #[error("conversation has no user turn")]
    NoUserTurn,
    #[error("conversation has no turns")]
    EmptyConversation,
    #[error("dataset {0} is already being written")]
    Busy(String),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("sample {sample_id} belongs to {found}, not {expected}")]
    WrongDataset {
        sample_id: String,
        expected: String,
        found: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetCategory {
    HumanToAiQuery,
    HumanToHumanQuestion,
    HumanToAiGuidance,
    HumanToHumanProvision,
    Auxiliary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub display_name: String,
    pub category: DatasetCategory,
    #[serde(default)]
    pub retained_count: u64,
}

impl DatasetDescriptor {
    pub fn new(dataset_id: &str, display_name: &str, category: DatasetCategory) -> Self {
        Self {
            dataset_id: dataset_id.to_string(),
            display_name: display_name.to_string(),
            category,
            retained_count: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub dataset_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub source_meta: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<AnnotationRecord>,
}

impl SampleRecord {
    /// Builds a record, rejecting text that is empty after trimming.
    pub fn new(dataset_id: &str, text: &str) -> Option<Self> {
        if text.trim().is_empty() {
            return None;
        }
        Some(Self {
            sample_id: sample_id(dataset_id, text),
            dataset_id: dataset_id.to_string(),
            text: text.to_string(),
            source_meta: BTreeMap::new(),
            annotations: None,
        })
    }

    pub fn dedup_key(&self) -> (String, String) {
        (self.dataset_id.clone(), normalize_whitespace(&self.text))
    }
}

/// Stable id: dataset id plus the first 16 hex digits of a hash over (dataset id, text).
pub fn sample_id(dataset_id: &str, text: &str) -> String {
    let mut buf = Vec::with_capacity(dataset_id.len() + text.len() + 1);
    buf.extend_from_slice(dataset_id.as_bytes());
    buf.push(0);
    buf.extend_from_slice(text.as_bytes());
    format!("{dataset_id}:{}", &sha256_hex(&buf)[..16])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn from_pairs(pairs: &[(Role, &str)]) -> Self {
        Self {
            turns: pairs
                .iter()
                .map(|(role, content)| Turn {
                    role: *role,
                    content: content.to_string(),
                })
                .collect(),
        }
    }
}

/// Content of the first user turn.
pub fn extract_first_turn(conv: &Conversation) -> Result<&str, CorpusError> {
    if conv.turns.is_empty() {
        return Err(CorpusError::EmptyConversation);
    }
    conv.turns
        .iter()
        .find(|t| t.role == Role::User)
        .map(|t| t.content.as_str())
        .ok_or(CorpusError::NoUserTurn)
}

/// Keeps the first occurrence of every (dataset id, whitespace-normalized text).
pub fn deduplicate(samples: Vec<SampleRecord>) -> Vec<SampleRecord> {
    let mut seen = HashSet::new();
    samples
        .into_iter()
        .filter(|s| seen.insert(s.dedup_key()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestFormat {
    /// `{"text": ...}` plus extra fields, which are kept in `source_meta`.
    JsonlTextField,
    /// `{"turns": [{"role": ..., "content": ...}]}`; only the first user turn is kept.
    JsonlConversation,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub dataset_id: String,
    pub total_lines: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub duplicates: usize,
    /// Subset of `rejected` that parsed fine but failed the caller's keep predicate.
    pub filtered_out: usize,
    pub retained_count: u64,
}

/// Optional caller hook deciding whether a well-formed sample is kept
/// (for instance an "interrogatives only" rule).
pub type KeepPredicate<'a> = &'a (dyn Fn(&SampleRecord) -> bool + Sync);

#[derive(Default)]
pub struct IngestOptions<'a> {
    pub keep: Option<KeepPredicate<'a>>,
}

#[derive(Debug)]
enum LineOutcome {
    Sample(SampleRecord),
    Malformed,
}

fn parse_line(line: &str, format: IngestFormat, dataset_id: &str) -> LineOutcome {
    let Ok(Value::Object(mut obj)) = serde_json::from_str::<Value>(line) else {
        return LineOutcome::Malformed;
    };
    match format {
        IngestFormat::JsonlTextField => {
            let Some(Value::String(text)) = obj.remove("text") else {
                return LineOutcome::Malformed;
            };
            match SampleRecord::new(dataset_id, &text) {
                Some(mut rec) => {
                    rec.source_meta = obj.into_iter().collect();
                    LineOutcome::Sample(rec)
                }
                None => LineOutcome::Malformed,
            }
        }
        IngestFormat::JsonlConversation => {
            let Some(turns) = obj.remove("turns") else {
                return LineOutcome::Malformed;
            };
            let Ok(turns) = serde_json::from_value::<Vec<Turn>>(turns) else {
                return LineOutcome::Malformed;
            };
            let conv = Conversation { turns };
            match extract_first_turn(&conv) {
                Ok(text) => match SampleRecord::new(dataset_id, text) {
                    Some(mut rec) => {
                        rec.source_meta = obj.into_iter().collect();
                        LineOutcome::Sample(rec)
                    }
                    None => LineOutcome::Malformed,
                },
                Err(err) => {
                    log::debug!("skipping conversation: {err}");
                    LineOutcome::Malformed
                }
            }
        }
    }
}

/// Directory-backed corpus store.
pub struct Store {
    root: PathBuf,
    registry_lock: Mutex<()>,
    writers: Mutex<HashSet<String>>,
}

struct WriterGuard<'a> {
    store: &'a Store,
    dataset_id: String,
}

impl Drop for WriterGuard<'_> {
    fn drop(&mut self) {
        if let Ok(mut w) = self.store.writers.lock() {
            w.remove(&self.dataset_id);
        }
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let root = root.into();
        let shards = root.join("shards");
        fs::create_dir_all(&shards).map_err(io_err(&shards))?;
        Ok(Self {
            root,
            registry_lock: Mutex::new(()),
            writers: Mutex::new(HashSet::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn registry_path(&self) -> PathBuf {
        self.root.join("registry.json")
    }

    pub fn shard_path(&self, dataset_id: &str) -> PathBuf {
        self.root.join("shards").join(format!("{dataset_id}.jsonl"))
    }

    pub fn registry(&self) -> Result<Vec<DatasetDescriptor>, CorpusError> {
        let path = self.registry_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_json(&path).map_err(io_err(&path))
    }

    pub fn descriptor(&self, dataset_id: &str) -> Result<DatasetDescriptor, CorpusError> {
        self.registry()?
            .into_iter()
            .find(|d| d.dataset_id == dataset_id)
            .ok_or_else(|| CorpusError::UnknownDataset(dataset_id.to_string()))
    }

    pub fn samples(&self, dataset_id: &str) -> Result<Vec<SampleRecord>, CorpusError> {
        let path = self.shard_path(dataset_id);
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&path).map_err(io_err(&path))
    }

    fn claim_writer(&self, dataset_id: &str) -> Result<WriterGuard<'_>, CorpusError> {
        let mut writers = self.writers.lock().expect("writer set poisoned");
        if !writers.insert(dataset_id.to_string()) {
            return Err(CorpusError::Busy(dataset_id.to_string()));
        }
        Ok(WriterGuard {
            store: self,
            dataset_id: dataset_id.to_string(),
        })
    }

    fn upsert_descriptor(&self, descriptor: &DatasetDescriptor) -> Result<(), CorpusError> {
        let _guard = self.registry_lock.lock().expect("registry lock poisoned");
        let mut registry = self.registry()?;
        match registry
            .iter_mut()
            .find(|d| d.dataset_id == descriptor.dataset_id)
        {
            Some(existing) => *existing = descriptor.clone(),
            None => registry.push(descriptor.clone()),
        }
        let path = self.registry_path();
        write_json_atomic(&path, &registry).map_err(io_err(&path))
    }

    /// Replaces a dataset's shard with `records` and sets its retained count.
    pub fn write_samples(
        &self,
        descriptor: &DatasetDescriptor,
        records: &[SampleRecord],
    ) -> Result<DatasetDescriptor, CorpusError> {
        let _writer = self.claim_writer(&descriptor.dataset_id)?;
        self.write_samples_unlocked(descriptor, records)
    }

    fn write_samples_unlocked(
        &self,
        descriptor: &DatasetDescriptor,
        records: &[SampleRecord],
    ) -> Result<DatasetDescriptor, CorpusError> {
        if let Some(bad) = records.iter().find(|r| r.dataset_id != descriptor.dataset_id) {
            return Err(CorpusError::WrongDataset {
                sample_id: bad.sample_id.clone(),
                expected: descriptor.dataset_id.clone(),
                found: bad.dataset_id.clone(),
            });
        }
        let path = self.shard_path(&descriptor.dataset_id);
        write_jsonl_atomic(&path, records).map_err(io_err(&path))?;
        let mut updated = descriptor.clone();
        updated.retained_count = records.len() as u64;
        self.upsert_descriptor(&updated)?;
        Ok(updated)
    }

    /// Ingests a JSONL file into the dataset described by `descriptor`.
    ///
    /// Blank lines are ignored and not counted. Malformed lines are rejected
    /// individually unless more than half of the file is malformed, in which
    /// case nothing is written and a format-mismatch error is returned.
    pub fn ingest(
        &self,
        path: &Path,
        format: IngestFormat,
        descriptor: &DatasetDescriptor,
        options: &IngestOptions<'_>,
    ) -> Result<IngestReport, CorpusError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut lines = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(path))?;
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
        self.ingest_lines(path, &lines, format, descriptor, options)
    }

    fn ingest_lines(
        &self,
        path: &Path,
        lines: &[String],
        format: IngestFormat,
        descriptor: &DatasetDescriptor,
        options: &IngestOptions<'_>,
    ) -> Result<IngestReport, CorpusError> {
        let _writer = self.claim_writer(&descriptor.dataset_id)?;
        let mut report = IngestReport {
            dataset_id: descriptor.dataset_id.clone(),
            total_lines: lines.len(),
            ..Default::default()
        };

        let mut malformed = 0usize;
        let mut parsed = Vec::new();
        for line in lines {
            match parse_line(line, format, &descriptor.dataset_id) {
                LineOutcome::Sample(rec) => parsed.push(rec),
                LineOutcome::Malformed => malformed += 1,
            }
        }
        if !lines.is_empty() && malformed as f64 > MALFORMED_ABORT_FRACTION * lines.len() as f64 {
            return Err(CorpusError::FormatMismatch {
                path: path.to_path_buf(),
                format,
                malformed,
                total: lines.len(),
            });
        }
        report.rejected = malformed;

        let mut existing = self.samples(&descriptor.dataset_id)?;
        let mut seen: HashSet<_> = existing.iter().map(SampleRecord::dedup_key).collect();
        for rec in parsed {
            if !seen.insert(rec.dedup_key()) {
                report.duplicates += 1;
                continue;
            }
            if let Some(keep) = options.keep {
                if !keep(&rec) {
                    report.rejected += 1;
                    report.filtered_out += 1;
                    continue;
                }
            }
            existing.push(rec);
            report.accepted += 1;
        }

        let updated = self.write_samples_unlocked(descriptor, &existing)?;
        report.retained_count = updated.retained_count;
        log::info!(
            "ingested {}: accepted={} rejected={} duplicates={} retained={}",
            descriptor.dataset_id,
            report.accepted,
            report.rejected,
            report.duplicates,
            report.retained_count
        );
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        path
    }

    fn desc(id: &str) -> DatasetDescriptor {
        DatasetDescriptor::new(id, id, DatasetCategory::HumanToAiQuery)
    }

    fn rec(text: &str) -> SampleRecord {
        SampleRecord::new("d", text).unwrap()
    }

    #[test]
    fn first_turn_rules() {
        let conv = Conversation::from_pairs(&[(Role::User, "A"), (Role::Assistant, "B"), (Role::User, "C")]);
        assert_eq!(extract_first_turn(&conv).unwrap(), "A");
        let conv = Conversation::from_pairs(&[(Role::User, "A")]);
        assert_eq!(extract_first_turn(&conv).unwrap(), "A");
        let conv = Conversation::from_pairs(&[(Role::Assistant, "B")]);
        assert!(matches!(extract_first_turn(&conv), Err(CorpusError::NoUserTurn)));
        let conv = Conversation::from_pairs(&[(Role::Assistant, "B"), (Role::User, "Q")]);
        assert_eq!(extract_first_turn(&conv).unwrap(), "Q");
    }

    #[test]
    fn dedup_examples() {
        let out = deduplicate(vec![rec("a"), rec("a"), rec("b")]);
        assert_eq!(out.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let out = deduplicate(vec![rec("a "), rec("a")]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "a ");
        assert!(deduplicate(Vec::new()).is_empty());
    }

    #[test]
    fn dedup_is_per_dataset() {
        let a = SampleRecord::new("x", "same").unwrap();
        let b = SampleRecord::new("y", "same").unwrap();
        assert_eq!(deduplicate(vec![a, b]).len(), 2);
    }

    #[test]
    fn sample_id_is_deterministic() {
        assert_eq!(sample_id("d", "hello"), sample_id("d", "hello"));
        assert_ne!(sample_id("d", "hello"), sample_id("e", "hello"));
        assert!(sample_id("d", "hello").starts_with("d:"));
        assert!(SampleRecord::new("d", "  \n ").is_none());
    }

    #[test]
    fn ingest_counts() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("store")).unwrap();
        let p = write_lines(
            dir.path(),
            "a.jsonl",
            &[r#"{"text":"one"}"#, r#"{"text":"two"}"#, r#"{"text":"three"}"#],
        );
        let r = store
            .ingest(&p, IngestFormat::JsonlTextField, &desc("d1"), &IngestOptions::default())
            .unwrap();
        assert_eq!((r.accepted, r.rejected, r.duplicates), (3, 0, 0));

        let p = write_lines(
            dir.path(),
            "b.jsonl",
            &[r#"{"text":"one"}"#, r#"{"text":"one"}"#, r#"{"text":"two"}"#],
        );
        let r = store
            .ingest(&p, IngestFormat::JsonlTextField, &desc("d2"), &IngestOptions::default())
            .unwrap();
        assert_eq!((r.accepted, r.rejected, r.duplicates), (2, 0, 1));
        assert_eq!(store.descriptor("d2").unwrap().retained_count, 2);
    }

    #[test]
    fn ingest_is_idempotent_and_preserves_meta() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let p = write_lines(
            dir.path(),
            "a.jsonl",
            &[r#"{"text":"q1","url":"u1"}"#, r#"{"text":"q2","score":3}"#],
        );
        let d = desc("d");
        store.ingest(&p, IngestFormat::JsonlTextField, &d, &IngestOptions::default()).unwrap();
        let r = store.ingest(&p, IngestFormat::JsonlTextField, &d, &IngestOptions::default()).unwrap();
        assert_eq!((r.accepted, r.duplicates, r.retained_count), (0, 2, 2));
        let samples = store.samples("d").unwrap();
        assert_eq!(samples[0].source_meta["url"], Value::String("u1".into()));
        assert_eq!(samples[1].source_meta["score"], Value::from(3));
    }

    #[test]
    fn conversations_keep_first_user_turn() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let p = write_lines(
            dir.path(),
            "c.jsonl",
            &[
                r#"{"turns":[{"role":"user","content":"first"},{"role":"assistant","content":"x"},{"role":"user","content":"second"}],"lang":"en"}"#,
                r#"{"turns":[{"role":"assistant","content":"only bot"}]}"#,
                r#"{"turns":[{"role":"user","content":"another"}]}"#,
            ],
        );
        let r = store
            .ingest(&p, IngestFormat::JsonlConversation, &desc("c"), &IngestOptions::default())
            .unwrap();
        assert_eq!((r.accepted, r.rejected, r.duplicates), (2, 1, 0));
        let texts: Vec<_> = store.samples("c").unwrap().into_iter().map(|s| s.text).collect();
        assert_eq!(texts, ["first", "another"]);
    }

    #[test]
    fn mostly_malformed_file_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let p = write_lines(
            dir.path(),
            "bad.jsonl",
            &[r#"{"text":"ok"}"#, "not json", r#"{"turns":[]}"#],
        );
        let err = store
            .ingest(&p, IngestFormat::JsonlTextField, &desc("b"), &IngestOptions::default())
            .unwrap_err();
        assert!(matches!(err, CorpusError::FormatMismatch { malformed: 2, total: 3, .. }));
        assert!(store.samples("b").unwrap().is_empty());

        // exactly half malformed is tolerated
        let p = write_lines(dir.path(), "half.jsonl", &[r#"{"text":"ok"}"#, "nope"]);
        let r = store
            .ingest(&p, IngestFormat::JsonlTextField, &desc("h"), &IngestOptions::default())
            .unwrap();
        assert_eq!((r.accepted, r.rejected), (1, 1));
    }

    #[test]
    fn keep_predicate_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let p = write_lines(
            dir.path(),
            "q.jsonl",
            &[r#"{"text":"Is it warming?"}"#, r#"{"text":"It is warming."}"#],
        );
        let only_questions = |r: &SampleRecord| r.text.trim_end().ends_with('?');
        let opts = IngestOptions {
            keep: Some(&only_questions),
        };
        let r = store.ingest(&p, IngestFormat::JsonlTextField, &desc("q"), &opts).unwrap();
        assert_eq!((r.accepted, r.rejected, r.filtered_out), (1, 1, 1));
    }

    #[test]
    fn unreadable_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let err = store
            .ingest(
                &dir.path().join("missing.jsonl"),
                IngestFormat::JsonlTextField,
                &desc("m"),
                &IngestOptions::default(),
            )
            .unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn concurrent_writer_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let _held = store.claim_writer("d").unwrap();
        assert!(matches!(store.write_samples(&desc("d"), &[]), Err(CorpusError::Busy(_))));
        assert!(store.write_samples(&desc("e"), &[]).is_ok());
    }
}
