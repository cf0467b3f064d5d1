//! Stage runner: ingest through export, with content-hash stamps so that
//! rerunning an unchanged stage is a no-op.

pub mod bundle;
pub mod config;
pub mod outputs;
pub mod stamp;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agreement::{agreement_report, load_instances, load_universe, AgreementError, AgreementReport};
use crate::analysis::AnalysisError;
use crate::annotator::{classify_samples, filter_samples, reassign_samples};
use crate::corpus::{CorpusError, IngestOptions, SampleRecord, Store};
use crate::gateway::{Gateway, GatewayError, GatewayStats, PromptDefaults, TemplateId};
use crate::merger::{merge_until_converged, GatewayJudge, MergeError, MergeTree};
use crate::miner::{build_topic_entries, mine_samples, read_topics, write_topics, EmbedInput, MiningManifest, TopicEntry};
use crate::taxonomy::{AnnotationRecord, Codebook, Dimension, FixedFlags, TaxonomyError};

pub use bundle::{load_bundle, BundleError, BundleManifest, TreeView};
pub use config::PipelineConfig;
pub use outputs::{AnalysisOutputs, Taxonomies};
use config::{AgreementSpec, MergeSettingSpec};
use outputs::{compute_analysis, DatasetInput, EntityInfo, EntityKind};
use stamp::{input_digest, output_hashes, Stamp, WorkdirLock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Filter,
    Mine,
    Merge,
    Reassign,
    Classify,
    Analyze,
    Agree,
    Export,
}

impl Stage {
    /// Every stage in execution order.
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Filter,
        Stage::Mine,
        Stage::Merge,
        Stage::Reassign,
        Stage::Classify,
        Stage::Analyze,
        Stage::Agree,
        Stage::Export,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Filter => "filter",
            Stage::Mine => "mine",
            Stage::Merge => "merge",
            Stage::Reassign => "reassign",
            Stage::Classify => "classify",
            Stage::Analyze => "analyze",
            Stage::Agree => "agree",
            Stage::Export => "export",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("{stage}: {missing} required")]
    Prerequisite { stage: Stage, missing: String },
    #[error("workdir is locked by another run: {0} (remove it if no run is active)")]
    Locked(PathBuf),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn gateway_exit(e: &GatewayError) -> i32 {
    match e {
        GatewayError::Config(_) | GatewayError::Template(_) => 2,
        e if e.is_backend() => 4,
        _ => 1,
    }
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 missing prerequisite, 4 backend, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Taxonomy(_) => 2,
            PipelineError::Agreement(AgreementError::Input { .. }) => 2,
            PipelineError::Prerequisite { .. } => 3,
            PipelineError::Gateway(e) => gateway_exit(e),
            PipelineError::Merge(MergeError::Gateway(e)) => gateway_exit(e),
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Command-line style overrides of the merge settings.
#[derive(Clone, Debug, Default)]
pub struct MergeOverrides {
    pub batch_size: Option<usize>,
    pub theta_mean: Option<f64>,
    pub theta_max: Option<f64>,
    pub embed_input: Option<EmbedInput>,
    /// Continue from an existing checkpoint instead of starting over.
    pub resume: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dry_run: bool,
    pub merge: MergeOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    UpToDate,
    WouldRun,
    WouldSkip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    pub duration_ms: u64,
    pub counts: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<GatewayStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_hit_rate: Option<f64>,
    pub outputs: Vec<String>,
}

#[derive(Default)]
struct Outcome {
    outputs: Vec<PathBuf>,
    counts: BTreeMap<String, Value>,
    extra_stats: GatewayStats,
}

fn add_stats(a: GatewayStats, b: GatewayStats) -> GatewayStats {
    GatewayStats {
        completions: a.completions + b.completions,
        cache_hits: a.cache_hits + b.cache_hits,
        backend_calls: a.backend_calls + b.backend_calls,
        retries: a.retries + b.retries,
        reasks: a.reasks + b.reasks,
        failures: a.failures + b.failures,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicAnnotationRow {
    pub sample_id: String,
    pub dataset_id: String,
    pub topics: Option<Vec<String>>,
    pub fixed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionTypeRow {
    pub sample_id: String,
    pub dataset_id: String,
    pub intents: Option<Vec<String>>,
    pub forms: Option<Vec<String>>,
    pub intent_fixed: bool,
    pub form_fixed: bool,
}

/// Agreement report plus the pairing diagnostics that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementOutput {
    pub dimension: Dimension,
    /// Sample ids present in only one annotator file.
    pub unmatched: usize,
    #[serde(flatten)]
    pub report: AgreementReport,
}

/// Pairs two annotator files and computes the agreement report.
pub fn run_agreement(spec: &AgreementSpec, seed: u64, books: &Taxonomies) -> Result<AgreementOutput, PipelineError> {
    let universe = match &spec.universe {
        Some(p) => load_universe(p)?,
        None => books.book(spec.dimension).entries().map(|e| e.code.clone()).collect(),
    };
    let (instances, unmatched) = load_instances(&spec.annotator_a, &spec.annotator_b, spec.dimension)?;
    if unmatched > 0 {
        log::warn!("{unmatched} sample id(s) appear in only one annotator file");
    }
    let report = agreement_report(&instances, &universe, spec.rounds, spec.level, seed)?;
    Ok(AgreementOutput {
        dimension: spec.dimension,
        unmatched,
        report,
    })
}

/// Digest of the effective configuration with location-only fields removed.
pub fn config_digest(config: &PipelineConfig) -> String {
    let mut c = config.clone();
    c.workdir = None;
    c.export.out_dir = None;
    c.gateway.cache_path = None;
    let value = serde_json::to_value(&c).expect("config serializes");
    crate::io::sha256_hex(&serde_json::to_vec(&value).expect("value serializes"))
}

pub struct Pipeline {
    config: PipelineConfig,
    config_digest: String,
    workdir: PathBuf,
    books: Taxonomies,
    dry_run: bool,
    resume: bool,
    gateway: Mutex<Option<Arc<Gateway>>>,
}

impl Pipeline {
    /// Loads a JSON config; relative paths in it are anchored at its directory.
    pub fn from_file(path: &Path, options: RunOptions) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, &base, options)
    }

    pub fn new(mut config: PipelineConfig, base: &Path, options: RunOptions) -> Result<Self, PipelineError> {
        if let Some(seed) = options.seed {
            config.seed = seed;
        }
        let o = &options.merge;
        for s in &mut config.merge.settings {
            if let Some(b) = o.batch_size {
                s.batch_size = b;
            }
            if let Some(t) = o.theta_mean {
                s.theta_mean = t;
            }
            if let Some(t) = o.theta_max {
                s.theta_max = t;
            }
            if let Some(e) = o.embed_input {
                s.embed_input = Some(e);
            }
        }
        config.validate().map_err(PipelineError::Config)?;
        let digest = config_digest(&config);
        config.resolve_paths(base);
        let workdir = options
            .workdir
            .clone()
            .or_else(|| config.workdir.clone())
            .unwrap_or_else(|| base.join("work"));
        if config.gateway.cache_path.is_none() {
            config.gateway.cache_path = Some(workdir.join("cache").join("completions.jsonl"));
        }
        let load = |p: &Option<PathBuf>, d: Dimension| -> Result<Codebook, TaxonomyError> {
            let book = match p {
                Some(p) => Codebook::load(p)?,
                None => Codebook::builtin(d),
            };
            if book.dimension != d {
                return Err(TaxonomyError::Load {
                    path: p.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                    message: format!("expected a {d} taxonomy, found {}", book.dimension),
                });
            }
            Ok(book)
        };
        let books = Taxonomies {
            topics: load(&config.taxonomy.topics, Dimension::Topic)?,
            intents: load(&config.taxonomy.intents, Dimension::Intent)?,
            forms: load(&config.taxonomy.forms, Dimension::Form)?,
        };
        for d in &config.datasets {
            for (codes, book) in [
                (&d.fixed.topics, &books.topics),
                (&d.fixed.intents, &books.intents),
                (&d.fixed.forms, &books.forms),
            ] {
                for code in codes.iter().flatten() {
                    if !book.contains(code) {
                        return Err(PipelineError::Config(format!(
                            "dataset {}: fixed {} code {code:?} is not in the taxonomy",
                            d.dataset_id, book.dimension
                        )));
                    }
                }
            }
        }
        Ok(Self {
            config,
            config_digest: digest,
            workdir,
            books,
            dry_run: options.dry_run,
            resume: options.merge.resume,
            gateway: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn taxonomies(&self) -> &Taxonomies {
        &self.books
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    /// Short identifier of the effective configuration.
    pub fn run_id(&self) -> &str {
        &self.config_digest[..12]
    }

    pub fn bundle_dir(&self) -> PathBuf {
        self.config.export.out_dir.clone().unwrap_or_else(|| self.workdir.join("bundle"))
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    fn defaults(&self) -> PromptDefaults {
        self.config.defaults()
    }

    /// The shared gateway, built on first use.
    pub fn gateway(&self) -> Result<Arc<Gateway>, PipelineError> {
        let mut slot = self.gateway.lock().expect("gateway slot");
        if let Some(g) = slot.as_ref() {
            return Ok(g.clone());
        }
        if let Some(dir) = self.config.gateway.cache_path.as_ref().and_then(|p| p.parent()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let g = Arc::new(Gateway::from_config(self.config.gateway.clone())?);
        *slot = Some(g.clone());
        Ok(g)
    }

    /// Replaces the gateway built from the config, e.g. with a fixture backend.
    /// Stamps do not see the substitution.
    pub fn set_gateway(&self, gateway: Gateway) {
        *self.gateway.lock().expect("gateway slot") = Some(Arc::new(gateway));
    }

    fn gateway_stats(&self) -> Option<GatewayStats> {
        self.gateway.lock().expect("gateway slot").as_ref().map(|g| g.stats())
    }

    fn require_backend(&self, what: &str) -> Result<(), PipelineError> {
        if self.config.gateway.backend.is_none() {
            return Err(PipelineError::Config(format!("{what} needs a configured gateway backend")));
        }
        Ok(())
    }

    fn gateway_identity(&self, ids: &[TemplateId], embeddings: bool) -> Value {
        let g = &self.config.gateway;
        let models: BTreeMap<&str, &str> = ids.iter().map(|id| (id.as_str(), g.model_for(*id))).collect();
        let decoding: BTreeMap<&str, Value> = ids
            .iter()
            .filter_map(|id| g.decoding.get(id).map(|d| (id.as_str(), serde_json::to_value(d).expect("decoding"))))
            .collect();
        json!({
            "backend": g.backend,
            "base_url": g.base_url,
            "models": models,
            "decoding": decoding,
            "embedding_model": if embeddings { Some(&g.embedding_model) } else { None },
            "mock_embed_dim": g.mock.embed_dim,
            "mock_seed": g.mock.seed,
        })
    }

    fn gateway_inputs(&self) -> Vec<PathBuf> {
        let g = &self.config.gateway;
        [&g.prompts_dir, &g.mock.fixtures, &g.mock.rules]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }

    fn taxonomy_json(&self, dims: &[Dimension]) -> Value {
        Value::Array(
            dims.iter()
                .map(|d| serde_json::to_value(self.books.book(*d)).expect("codebook"))
                .collect(),
        )
    }

    fn stage_config(&self, stage: Stage) -> Value {
        let c = &self.config;
        let prompt = json!({"subject": c.subject, "n": c.n, "m": c.m});
        match stage {
            Stage::Ingest => json!(c.datasets.iter().map(|d| json!({
                "dataset_id": d.dataset_id, "display_name": d.display_name,
                "category": d.category, "format": d.format,
            })).collect::<Vec<_>>()),
            Stage::Filter => json!({
                "filter": c.datasets.iter().map(|d| (d.dataset_id.clone(), d.filter)).collect::<BTreeMap<_, _>>(),
                "prompt": prompt,
                "gateway": self.gateway_identity(&[TemplateId::RelevanceFilter], false),
            }),
            Stage::Mine => json!({
                "mining": c.mining, "prompt": prompt,
                "gateway": self.gateway_identity(&[TemplateId::InitialTopicGeneration], true),
            }),
            Stage::Merge => json!({
                "merge": c.merge, "mining_embed_input": c.mining.embed_input, "prompt": prompt,
                "gateway": self.gateway_identity(&[TemplateId::TopicMerging], true),
            }),
            Stage::Reassign => json!({
                "fixed": c.datasets.iter().map(|d| (d.dataset_id.clone(), d.fixed.topics.clone())).collect::<BTreeMap<_, _>>(),
                "taxonomy": self.taxonomy_json(&[Dimension::Topic]),
                "prompt": prompt,
                "gateway": self.gateway_identity(&[TemplateId::TopicReassignment], false),
            }),
            Stage::Classify => json!({
                "fixed": c.datasets.iter().map(|d| (d.dataset_id.clone(), (d.fixed.intents.clone(), d.fixed.forms.clone()))).collect::<BTreeMap<_, _>>(),
                "taxonomy": self.taxonomy_json(&[Dimension::Intent, Dimension::Form]),
                "gateway": self.gateway_identity(&[TemplateId::QuestionTypeClassification], false),
            }),
            Stage::Analyze => json!({
                "analysis": c.analysis,
                "datasets": c.datasets.iter().map(|d| &d.dataset_id).collect::<Vec<_>>(),
                "taxonomy": self.taxonomy_json(&Dimension::ALL),
            }),
            Stage::Agree => json!({
                "agreement": c.agreement.as_ref().map(|a| json!({"dimension": a.dimension, "rounds": a.rounds, "level": a.level})),
                "seed": c.seed,
                "taxonomy": c.agreement.as_ref().map(|a| self.taxonomy_json(&[a.dimension])),
            }),
            Stage::Export => json!({"config_digest": self.config_digest, "out_dir": self.bundle_dir()}),
        }
    }

    /// Input paths of a stage, and the prerequisite paths that must exist
    /// (with the stage that produces each).
    fn stage_inputs(&self, stage: Stage) -> (Vec<PathBuf>, Vec<(PathBuf, Stage)>) {
        let raw = self.dir("raw");
        let corpus = self.dir("corpus");
        let mut llm = self.gateway_inputs();
        match stage {
            Stage::Ingest => (self.config.datasets.iter().map(|d| d.path.clone()).collect(), vec![]),
            Stage::Filter => {
                llm.insert(0, raw.clone());
                (llm, vec![(raw.join("registry.json"), Stage::Ingest)])
            }
            Stage::Mine | Stage::Reassign | Stage::Classify => {
                llm.insert(0, corpus.clone());
                (llm, vec![(corpus.join("registry.json"), Stage::Filter)])
            }
            Stage::Merge => {
                let topics = self.dir("mine").join("topics.jsonl");
                llm.insert(0, topics.clone());
                (llm, vec![(topics, Stage::Mine)])
            }
            Stage::Analyze => {
                let t = self.dir("annotate").join("topics.jsonl");
                let q = self.dir("annotate").join("question_types.jsonl");
                (
                    vec![corpus.clone(), t.clone(), q.clone()],
                    vec![
                        (corpus.join("registry.json"), Stage::Filter),
                        (t, Stage::Reassign),
                        (q, Stage::Classify),
                    ],
                )
            }
            Stage::Agree => {
                let mut v = Vec::new();
                if let Some(a) = &self.config.agreement {
                    v.push(a.annotator_a.clone());
                    v.push(a.annotator_b.clone());
                    v.extend(a.universe.clone());
                }
                (v, vec![])
            }
            Stage::Export => {
                let analysis = self.dir("analysis");
                let mut v = vec![analysis.clone(), self.dir("agreement").join("report.json")];
                for s in &self.config.merge.settings {
                    v.push(self.merge_dir(s).join("checkpoint.json"));
                }
                (v, vec![(analysis.join("distributions.json"), Stage::Analyze)])
            }
        }
    }

    fn declared_outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Ingest => vec![self.dir("raw")],
            Stage::Filter => vec![self.dir("corpus"), self.dir("filter")],
            Stage::Mine => vec![self.dir("mine")],
            Stage::Merge => vec![self.dir("merge")],
            Stage::Reassign => vec![self.dir("annotate").join("topics.jsonl")],
            Stage::Classify => vec![self.dir("annotate").join("question_types.jsonl")],
            Stage::Analyze => vec![self.dir("analysis"), self.dir("annotated")],
            Stage::Agree => vec![self.dir("agreement")],
            Stage::Export => vec![self.bundle_dir()],
        }
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.dir("stamps").join(format!("{stage}.json"))
    }

    fn digest(&self, stage: Stage) -> Result<String, PipelineError> {
        let (inputs, _) = self.stage_inputs(stage);
        input_digest(stage.as_str(), &self.stage_config(stage), &inputs, &self.workdir).map_err(io_err(&self.workdir))
    }

    fn up_to_date(&self, stage: Stage, digest: &str) -> bool {
        let Ok(stamp) = crate::io::read_json::<Stamp>(&self.stamp_path(stage)) else {
            return false;
        };
        stamp.input_digest == digest && stamp.outputs_intact(&self.workdir)
    }

    fn check_prerequisites(&self, stage: Stage, planned: &[Stage]) -> Result<(), PipelineError> {
        if stage == Stage::Agree && self.config.agreement.is_none() {
            return Err(PipelineError::Config("agree needs an agreement section".into()));
        }
        let (inputs, prereqs) = self.stage_inputs(stage);
        for (path, producer) in prereqs {
            if !path.exists() && !planned.contains(&producer) {
                return Err(PipelineError::Prerequisite {
                    stage,
                    missing: producer.to_string(),
                });
            }
        }
        if matches!(stage, Stage::Ingest | Stage::Agree) {
            for p in inputs {
                if !p.exists() {
                    return Err(PipelineError::Config(format!("{stage}: input {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Expands `all` and drops the agreement stage when it is not configured.
    pub fn all_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != Stage::Agree || self.config.agreement.is_some())
            .collect()
    }

    /// Runs (or, in dry-run mode, plans) `stages` in the given order.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<StageReport>, PipelineError> {
        if self.dry_run {
            return self.plan(stages);
        }
        let _lock = WorkdirLock::acquire(&self.workdir)
            .map_err(io_err(&self.workdir))?
            .ok_or_else(|| PipelineError::Locked(self.workdir.join(".lock")))?;
        let mut reports = Vec::new();
        for &stage in stages {
            reports.push(self.run_stage(stage)?);
        }
        Ok(reports)
    }

    fn plan(&self, stages: &[Stage]) -> Result<Vec<StageReport>, PipelineError> {
        let mut reports = Vec::new();
        let mut will_run: Vec<Stage> = Vec::new();
        for (i, &stage) in stages.iter().enumerate() {
            self.check_prerequisites(stage, &stages[..i])?;
            let (inputs, _) = self.stage_inputs(stage);
            let touched: Vec<PathBuf> = will_run.iter().flat_map(|s| self.declared_outputs(*s)).collect();
            let upstream_changes = inputs.iter().any(|p| touched.iter().any(|t| p.starts_with(t)));
            let run = upstream_changes || !self.up_to_date(stage, &self.digest(stage)?);
            if run {
                will_run.push(stage);
            }
            reports.push(StageReport {
                stage,
                status: if run { StageStatus::WouldRun } else { StageStatus::WouldSkip },
                duration_ms: 0,
                counts: BTreeMap::new(),
                gateway: None,
                cache_hit_rate: None,
                outputs: self.declared_outputs(stage).iter().map(|p| p.display().to_string()).collect(),
            });
        }
        Ok(reports)
    }

    fn run_stage(&self, stage: Stage) -> Result<StageReport, PipelineError> {
        self.check_prerequisites(stage, &[])?;
        let digest = self.digest(stage)?;
        let start = Instant::now();
        if self.up_to_date(stage, &digest) {
            log::info!("{stage}: up to date");
            return Ok(StageReport {
                stage,
                status: StageStatus::UpToDate,
                duration_ms: start.elapsed().as_millis() as u64,
                counts: BTreeMap::new(),
                gateway: None,
                cache_hit_rate: None,
                outputs: Vec::new(),
            });
        }
        log::info!("{stage}: running");
        let before = self.gateway_stats();
        let outcome = match stage {
            Stage::Ingest => self.ingest(),
            Stage::Filter => self.filter(),
            Stage::Mine => self.mine(),
            Stage::Merge => self.merge(),
            Stage::Reassign => self.reassign(),
            Stage::Classify => self.classify(),
            Stage::Analyze => self.analyze(),
            Stage::Agree => self.agree(),
            Stage::Export => self.export(),
        }?;
        let stats = match (before, self.gateway_stats()) {
            (Some(b), Some(a)) => Some(add_stats(a.since(&b), outcome.extra_stats)),
            (None, Some(a)) => Some(add_stats(a, outcome.extra_stats)),
            _ => (outcome.extra_stats != GatewayStats::default()).then_some(outcome.extra_stats),
        };
        let stamp = Stamp {
            stage: stage.to_string(),
            input_digest: digest,
            outputs: output_hashes(&outcome.outputs, &self.workdir).map_err(io_err(&self.workdir))?,
        };
        let sp = self.stamp_path(stage);
        crate::io::write_json_atomic(&sp, &stamp).map_err(io_err(&sp))?;
        Ok(StageReport {
            stage,
            status: StageStatus::Ran,
            duration_ms: start.elapsed().as_millis() as u64,
            counts: outcome.counts,
            cache_hit_rate: stats.and_then(|s| s.cache_hit_rate()),
            gateway: stats,
            outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        })
    }

    fn fresh_dir(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let d = self.dir(name);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(io_err(&d))?;
        }
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        Ok(d)
    }

    fn ingest(&self) -> Result<Outcome, PipelineError> {
        let raw = self.fresh_dir("raw")?;
        let store = Store::open(&raw)?;
        let mut out = Outcome::default();
        for spec in &self.config.datasets {
            let report = store.ingest(&spec.path, spec.format, &spec.descriptor(), &IngestOptions::default())?;
            log::info!(
                "ingest {}: {} accepted, {} rejected, {} duplicates",
                spec.dataset_id,
                report.accepted,
                report.rejected,
                report.duplicates
            );
            out.counts.insert(spec.dataset_id.clone(), serde_json::to_value(&report).expect("report"));
        }
        out.outputs.push(raw);
        Ok(out)
    }

    fn filter(&self) -> Result<Outcome, PipelineError> {
        let raw = Store::open(self.dir("raw"))?;
        let corpus_dir = self.fresh_dir("corpus")?;
        let corpus = Store::open(&corpus_dir)?;
        let filter_dir = self.fresh_dir("filter")?;
        let defaults = self.defaults();
        let mut out = Outcome::default();
        let mut decisions = Vec::new();
        for spec in &self.config.datasets {
            let samples = raw.samples(&spec.dataset_id)?;
            let total = samples.len();
            let (kept, flagged) = if spec.filter {
                self.require_backend("relevance filtering")?;
                let gw = self.gateway()?;
                let d = filter_samples(&gw, &samples, &defaults);
                let flagged = d.iter().filter(|x| x.flagged).count();
                let kept: Vec<SampleRecord> =
                    samples.into_iter().zip(&d).filter(|(_, x)| x.keep).map(|(s, _)| s).collect();
                decisions.extend(d);
                (kept, flagged)
            } else {
                (samples, 0)
            };
            corpus.write_samples(&raw.descriptor(&spec.dataset_id)?, &kept)?;
            out.counts.insert(
                spec.dataset_id.clone(),
                json!({"total": total, "kept": kept.len(), "dropped": total - kept.len(), "flagged": flagged}),
            );
        }
        let p = filter_dir.join("decisions.jsonl");
        crate::io::write_jsonl_atomic(&p, &decisions).map_err(io_err(&p))?;
        out.outputs.extend([corpus_dir, filter_dir]);
        Ok(out)
    }

    fn mining_samples(&self, corpus: &Store) -> Result<Vec<SampleRecord>, PipelineError> {
        let mut samples = Vec::new();
        for spec in &self.config.datasets {
            let included = match &self.config.mining.datasets {
                Some(list) => list.contains(&spec.dataset_id),
                None => true,
            };
            if included {
                samples.extend(corpus.samples(&spec.dataset_id)?);
            }
        }
        Ok(samples)
    }

    fn mine(&self) -> Result<Outcome, PipelineError> {
        self.require_backend("topic mining")?;
        let corpus = Store::open(self.dir("corpus"))?;
        let samples = self.mining_samples(&corpus)?;
        let gw = self.gateway()?;
        let defaults = self.defaults();
        let (assignments, summary) = mine_samples(&gw, &samples, &defaults)?;
        let embed_input = self.config.mining.embed_input;
        let topics = build_topic_entries(&gw, &assignments, embed_input)?;
        let dir = self.fresh_dir("mine")?;
        let p = dir.join("assignments.jsonl");
        crate::io::write_jsonl_atomic(&p, &assignments).map_err(io_err(&p))?;
        let p = dir.join("topics.jsonl");
        write_topics(&p, &topics).map_err(io_err(&p))?;
        let manifest = MiningManifest {
            subject: defaults.subject.clone(),
            n: defaults.n,
            m: defaults.m,
            generation_model: self.config.gateway.model_for(TemplateId::InitialTopicGeneration).to_string(),
            embedding_model: self.config.gateway.embedding_model.clone(),
            embed_input,
            summary: summary.clone(),
            topics: topics.len(),
            total_count: topics.iter().map(|t| t.count).sum(),
        };
        let p = dir.join("manifest.json");
        crate::io::write_json_atomic(&p, &manifest).map_err(io_err(&p))?;
        let mut out = Outcome::default();
        out.counts.insert("samples".into(), json!(summary.samples));
        out.counts.insert("assigned".into(), json!(summary.assigned));
        out.counts.insert("irrelevant".into(), json!(summary.irrelevant));
        out.counts.insert("failed".into(), json!(summary.failed.len()));
        out.counts.insert("topics".into(), json!(topics.len()));
        out.outputs.push(dir);
        Ok(out)
    }

    fn merge_dir(&self, s: &MergeSettingSpec) -> PathBuf {
        self.dir("merge").join(&s.name)
    }

    fn setting_gateway(&self, s: &MergeSettingSpec) -> Result<(Arc<Gateway>, bool), PipelineError> {
        if s.judge_model.is_none() && s.embedding_model.is_none() {
            return Ok((self.gateway()?, false));
        }
        let mut cfg = self.config.gateway.clone();
        if let Some(m) = &s.judge_model {
            cfg.models.insert(TemplateId::TopicMerging, m.clone());
        }
        if let Some(m) = &s.embedding_model {
            cfg.embedding_model = m.clone();
        }
        if let Some(dir) = cfg.cache_path.as_ref().and_then(|p| p.parent()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok((Arc::new(Gateway::from_config(cfg)?), true))
    }

    fn merge(&self) -> Result<Outcome, PipelineError> {
        self.require_backend("topic merging")?;
        let tp = self.dir("mine").join("topics.jsonl");
        let mined = read_topics(&tp).map_err(io_err(&tp))?;
        let defaults = self.defaults();
        let mut out = Outcome::default();
        let root = self.dir("merge");
        let keep: Vec<&str> = self.config.merge.settings.iter().map(|s| s.name.as_str()).collect();
        if root.exists() {
            for e in fs::read_dir(&root).map_err(io_err(&root))? {
                let e = e.map_err(io_err(&root))?;
                if !keep.contains(&e.file_name().to_string_lossy().as_ref()) {
                    let p = e.path();
                    if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) }.map_err(io_err(&p))?;
                }
            }
        }
        for spec in &self.config.merge.settings {
            let (gw, own) = self.setting_gateway(spec)?;
            let before = gw.stats();
            let input = spec.embed_input.unwrap_or(self.config.mining.embed_input);
            let topics: Vec<TopicEntry> = if input != self.config.mining.embed_input || own {
                let texts: Vec<String> = mined.iter().map(|t| input.text(&t.label, &t.explanation)).collect();
                let vectors = if texts.is_empty() { Vec::new() } else { gw.embed_batch(&texts)? };
                mined
                    .iter()
                    .zip(vectors)
                    .map(|(t, v)| TopicEntry { embedding: v, ..t.clone() })
                    .collect()
            } else {
                mined.clone()
            };
            let dir = self.merge_dir(spec);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let checkpoint = dir.join("checkpoint.json");
            let tree = if self.resume && checkpoint.exists() {
                log::info!("merge {}: resuming from checkpoint", spec.name);
                crate::io::read_json::<MergeTree>(&checkpoint).map_err(io_err(&checkpoint))?
            } else {
                let mut t = MergeTree::from_topics(topics);
                for label in &self.config.merge.lock {
                    if t.lock_label(label) == 0 {
                        log::warn!("merge {}: lock label {label:?} matches no topic", spec.name);
                    }
                }
                t
            };
            let topics_in = tree.leaves().len();
            let judge = GatewayJudge {
                gateway: &gw,
                defaults: defaults.clone(),
            };
            let settings = spec.settings(&defaults);
            let tree = merge_until_converged(tree, &judge, &settings, |t| crate::io::write_json_atomic(&checkpoint, t))?;
            tree.validate().map_err(PipelineError::Invariant)?;
            let final_topics = tree.topics();
            let p = dir.join("topics.jsonl");
            write_topics(&p, &final_topics).map_err(io_err(&p))?;
            out.counts.insert(
                spec.name.clone(),
                json!({
                    "topics_in": topics_in,
                    "topics_out": final_topics.len(),
                    "rounds": tree.rounds(),
                    "stop_reason": tree.stop_reason,
                }),
            );
            if own {
                out.extra_stats = add_stats(out.extra_stats, gw.stats().since(&before));
            }
        }
        out.outputs.push(root);
        Ok(out)
    }

    fn reassign(&self) -> Result<Outcome, PipelineError> {
        let corpus = Store::open(self.dir("corpus"))?;
        let defaults = self.defaults();
        let mut rows = Vec::new();
        let mut out = Outcome::default();
        for spec in &self.config.datasets {
            let samples = corpus.samples(&spec.dataset_id)?;
            let gw = if spec.fixed.topics.is_some() || samples.is_empty() {
                Arc::new(Gateway::unconfigured())
            } else {
                self.gateway()?
            };
            let (codes, summary) = reassign_samples(&gw, &samples, &self.books.topics, &defaults, &spec.fixed)?;
            for (s, c) in samples.iter().zip(codes) {
                rows.push(TopicAnnotationRow {
                    sample_id: s.sample_id.clone(),
                    dataset_id: s.dataset_id.clone(),
                    topics: c,
                    fixed: spec.fixed.topics.is_some(),
                });
            }
            out.counts.insert(spec.dataset_id.clone(), serde_json::to_value(&summary).expect("summary"));
        }
        let p = self.dir("annotate").join("topics.jsonl");
        crate::io::write_jsonl_atomic(&p, &rows).map_err(io_err(&p))?;
        out.outputs.push(p);
        Ok(out)
    }

    fn classify(&self) -> Result<Outcome, PipelineError> {
        let corpus = Store::open(self.dir("corpus"))?;
        let q = crate::taxonomy::QuestionTaxonomy {
            intents: self.books.intents.clone(),
            forms: self.books.forms.clone(),
        };
        let mut rows = Vec::new();
        let mut out = Outcome::default();
        for spec in &self.config.datasets {
            let samples = corpus.samples(&spec.dataset_id)?;
            let all_fixed = spec.fixed.intents.is_some() && spec.fixed.forms.is_some();
            let gw = if all_fixed || samples.is_empty() {
                Arc::new(Gateway::unconfigured())
            } else {
                self.gateway()?
            };
            let (types, summary) = classify_samples(&gw, &samples, &q, &spec.fixed)?;
            for (s, t) in samples.iter().zip(types) {
                rows.push(QuestionTypeRow {
                    sample_id: s.sample_id.clone(),
                    dataset_id: s.dataset_id.clone(),
                    intents: t.as_ref().map(|t| t.intents.clone()),
                    forms: t.as_ref().map(|t| t.forms.clone()),
                    intent_fixed: spec.fixed.intents.is_some(),
                    form_fixed: spec.fixed.forms.is_some(),
                });
            }
            out.counts.insert(spec.dataset_id.clone(), serde_json::to_value(&summary).expect("summary"));
        }
        let p = self.dir("annotate").join("question_types.jsonl");
        crate::io::write_jsonl_atomic(&p, &rows).map_err(io_err(&p))?;
        out.outputs.push(p);
        Ok(out)
    }

    /// Joins the corpus with its annotations, one sample list per dataset.
    pub fn annotated_samples(&self) -> Result<Vec<(EntityInfo, Vec<SampleRecord>)>, PipelineError> {
        let corpus = Store::open(self.dir("corpus"))?;
        let tp = self.dir("annotate").join("topics.jsonl");
        let qp = self.dir("annotate").join("question_types.jsonl");
        let topics: Vec<TopicAnnotationRow> = crate::io::read_jsonl(&tp).map_err(io_err(&tp))?;
        let types: Vec<QuestionTypeRow> = crate::io::read_jsonl(&qp).map_err(io_err(&qp))?;
        let topics: HashMap<String, TopicAnnotationRow> = topics.into_iter().map(|r| (r.sample_id.clone(), r)).collect();
        let types: HashMap<String, QuestionTypeRow> = types.into_iter().map(|r| (r.sample_id.clone(), r)).collect();
        let mut out = Vec::new();
        for spec in &self.config.datasets {
            let descriptor = corpus.descriptor(&spec.dataset_id)?;
            let mut samples = corpus.samples(&spec.dataset_id)?;
            for s in &mut samples {
                let t = topics.get(&s.sample_id);
                let q = types.get(&s.sample_id);
                s.annotations = Some(AnnotationRecord {
                    topics: t.and_then(|t| t.topics.clone()),
                    intents: q.and_then(|q| q.intents.clone()),
                    forms: q.and_then(|q| q.forms.clone()),
                    fixed: FixedFlags {
                        topic: t.is_some_and(|t| t.fixed),
                        intent: q.is_some_and(|q| q.intent_fixed),
                        form: q.is_some_and(|q| q.form_fixed),
                    },
                });
            }
            let info = EntityInfo {
                id: descriptor.dataset_id.clone(),
                display_name: descriptor.display_name.clone(),
                kind: EntityKind::Dataset,
                category: Some(descriptor.category),
                members: Vec::new(),
                retained_count: descriptor.retained_count,
            };
            out.push((info, samples));
        }
        Ok(out)
    }

    fn analyze(&self) -> Result<Outcome, PipelineError> {
        let data = self.annotated_samples()?;
        let annotated_dir = self.fresh_dir("annotated")?;
        let annotated = Store::open(&annotated_dir)?;
        let corpus = Store::open(self.dir("corpus"))?;
        for (info, samples) in &data {
            annotated.write_samples(&corpus.descriptor(&info.id)?, samples)?;
        }
        let counts: BTreeMap<&str, u64> = data.iter().map(|(i, _)| (i.id.as_str(), i.retained_count)).collect();
        let groups: Vec<EntityInfo> = self
            .config
            .analysis
            .groups
            .iter()
            .map(|g| EntityInfo {
                id: g.group_id.clone(),
                display_name: g.display_name.clone().unwrap_or_else(|| g.group_id.clone()),
                kind: EntityKind::Group,
                category: None,
                members: g.members.clone(),
                retained_count: g.members.iter().map(|m| counts[m.as_str()]).sum(),
            })
            .collect();
        let inputs: Vec<DatasetInput<'_>> = data
            .iter()
            .map(|(info, samples)| DatasetInput {
                info: info.clone(),
                samples,
            })
            .collect();
        let result = compute_analysis(&inputs, &groups, &self.config.analysis, &self.books)?;
        let dir = self.fresh_dir("analysis")?;
        let write = |name: &str, v: &dyn erased::Json| -> Result<(), PipelineError> {
            let p = dir.join(name);
            crate::io::write_atomic(&p, &v.to_bytes()).map_err(io_err(&p))
        };
        write("entities.json", &result.entities)?;
        write("distributions.json", &result.distributions)?;
        write("similarity.json", &result.similarity)?;
        write("divergence.json", &result.divergence)?;
        write("cross.json", &result.cross)?;
        write("taxonomy.json", &self.books)?;
        let mut out = Outcome::default();
        out.counts.insert("entities".into(), json!(result.entities.len()));
        out.counts.insert("distributions".into(), json!(result.distributions.len()));
        out.counts.insert("cross_tables".into(), json!(result.cross.len()));
        out.outputs.extend([dir, annotated_dir]);
        Ok(out)
    }

    fn agree(&self) -> Result<Outcome, PipelineError> {
        let spec = self
            .config
            .agreement
            .as_ref()
            .ok_or_else(|| PipelineError::Config("agree needs an agreement section".into()))?;
        let result = run_agreement(spec, self.config.seed, &self.books)?;
        let dir = self.fresh_dir("agreement")?;
        let p = dir.join("report.json");
        crate::io::write_json_atomic(&p, &result).map_err(io_err(&p))?;
        let mut out = Outcome::default();
        out.counts.insert("instances".into(), json!(result.report.overall.instances));
        out.counts.insert("unmatched".into(), json!(result.unmatched));
        out.counts.insert("jaccard".into(), json!(result.report.overall.jaccard.value));
        out.counts.insert("micro_f1".into(), json!(result.report.overall.micro_f1.value));
        out.counts.insert("kappa".into(), json!(result.report.overall.kappa.value));
        out.outputs.push(dir);
        Ok(out)
    }

    fn export(&self) -> Result<Outcome, PipelineError> {
        let analysis = self.dir("analysis");
        let read = |name: &str| -> Result<Vec<u8>, PipelineError> {
            let p = analysis.join(name);
            fs::read(&p).map_err(io_err(&p))
        };
        let entities: Vec<EntityInfo> = {
            let p = analysis.join("entities.json");
            crate::io::read_json(&p).map_err(io_err(&p))?
        };
        let mut files = vec![
            ("distributions.json".to_string(), read("distributions.json")?),
            ("similarity.json".to_string(), read("similarity.json")?),
            ("divergence.json".to_string(), read("divergence.json")?),
            ("taxonomy.json".to_string(), read("taxonomy.json")?),
        ];
        let cross = read("cross.json")?;
        if cross.trim_ascii() != b"[]" {
            files.push(("cross.json".to_string(), cross));
        }
        let mut trees = Vec::new();
        for s in &self.config.merge.settings {
            let p = self.merge_dir(s).join("checkpoint.json");
            if p.exists() {
                let tree: MergeTree = crate::io::read_json(&p).map_err(io_err(&p))?;
                trees.push(TreeView::new(&s.name, s.settings(&self.defaults()), &tree));
            }
        }
        if !trees.is_empty() {
            files.push(("merge_tree.json".to_string(), erased::Json::to_bytes(&trees)));
        }
        let ap = self.dir("agreement").join("report.json");
        if ap.exists() {
            files.push(("agreement.json".to_string(), fs::read(&ap).map_err(io_err(&ap))?));
        }
        let out_dir = self.bundle_dir();
        if out_dir.join(bundle::MANIFEST).exists() {
            fs::remove_dir_all(&out_dir).map_err(io_err(&out_dir))?;
        }
        let manifest = bundle::write_bundle(&out_dir, self.run_id(), &self.config_digest, entities, &files)?;
        let mut out = Outcome::default();
        out.counts.insert("artifacts".into(), json!(manifest.artifacts.len()));
        out.counts.insert("run_id".into(), json!(manifest.run_id));
        out.outputs.push(out_dir);
        Ok(out)
    }
}

/// Pretty JSON bytes for any serializable value, usable as a trait object.
mod erased {
    pub trait Json {
        fn to_bytes(&self) -> Vec<u8>;
    }
    impl<T: serde::Serialize> Json for T {
        fn to_bytes(&self) -> Vec<u8> {
            let mut v = serde_json::to_vec_pretty(self).expect("serializable");
            v.push(b'\n');
            v
        }
    }
}
