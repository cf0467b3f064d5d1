//! Judge-model and embedding access: templating, caching, retries and
//! structured-output parsing on top of a pluggable [`ChatBackend`].

pub mod cache;
pub mod mock;
pub mod parse;
pub mod remote;
pub mod template;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, CompletionCache};
pub use mock::{MockBackend, MockRules};
pub use parse::{parse_structured_output, OutputSchema, ParseError, StructuredOutput};
pub use remote::RemoteBackend;
pub use template::{CompletionRequest, Decoding, PromptDefaults, PromptSet, PromptTemplate, TemplateError, TemplateId};

use crate::embedding::EmbeddingVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("backend returned empty content")]
    Refusal,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no mock fixture for prompt hash {0}")]
    NoFixture(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { code, .. } => *code >= 500 || *code == 429,
            _ => false,
        }
    }
}

/// A chat-completion plus embedding provider.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, model: &str, prompt: &str, req: &CompletionRequest) -> Result<String, BackendError>;
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend call failed after {attempts} attempt(s): {source}")]
    Backend {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("unusable judge output after re-ask: {0}")]
    Parse(#[from] ParseError),
    #[error("embedding error: {0}")]
    Embedding(String),
}

impl GatewayError {
    pub fn is_backend(&self) -> bool {
        matches!(self, GatewayError::Backend { .. } | GatewayError::Embedding(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub fixtures: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            fixtures: None,
            rules: None,
            embed_dim: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: Option<BackendKind>,
    pub base_url: Option<String>,
    pub default_model: String,
    /// Per-stage judge model; stages not listed use `default_model`.
    pub models: BTreeMap<TemplateId, String>,
    pub embedding_model: String,
    pub decoding: BTreeMap<TemplateId, Decoding>,
    pub concurrency: usize,
    pub cache_path: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub mock: MockConfig,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: None,
            base_url: None,
            default_model: "mock".into(),
            models: BTreeMap::new(),
            embedding_model: "mock-embed".into(),
            decoding: BTreeMap::new(),
            concurrency: 4,
            cache_path: None,
            prompts_dir: None,
            mock: MockConfig::default(),
            api_key_env: "CORPUSALIGN_API_KEY".into(),
            timeout_secs: 120,
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

impl GatewayConfig {
    pub fn mock() -> Self {
        Self {
            backend: Some(BackendKind::Mock),
            ..Self::default()
        }
    }

    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.cache_path);
        fix(&mut self.prompts_dir);
        fix(&mut self.mock.fixtures);
        fix(&mut self.mock.rules);
    }

    pub fn model_for(&self, id: TemplateId) -> &str {
        self.models.get(&id).map(String::as_str).unwrap_or(&self.default_model)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub cache_hit: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub completions: u64,
    pub cache_hits: u64,
    pub backend_calls: u64,
    pub retries: u64,
    pub reasks: u64,
    pub failures: u64,
}

impl GatewayStats {
    pub fn cache_hit_rate(&self) -> Option<f64> {
        (self.completions > 0).then(|| self.cache_hits as f64 / self.completions as f64)
    }

    pub fn since(&self, earlier: &GatewayStats) -> GatewayStats {
        GatewayStats {
            completions: self.completions - earlier.completions,
            cache_hits: self.cache_hits - earlier.cache_hits,
            backend_calls: self.backend_calls - earlier.backend_calls,
            retries: self.retries - earlier.retries,
            reasks: self.reasks - earlier.reasks,
            failures: self.failures - earlier.failures,
        }
    }
}

#[derive(Default)]
struct Counters {
    completions: AtomicU64,
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
    retries: AtomicU64,
    reasks: AtomicU64,
    failures: AtomicU64,
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock poisoned");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

const EMBED_CHUNK: usize = 256;

pub struct Gateway {
    backend: Option<Arc<dyn ChatBackend>>,
    config: GatewayConfig,
    prompts: PromptSet,
    cache: CompletionCache,
    slots: Slots,
    counters: Counters,
}

impl Gateway {
    pub fn new(backend: Option<Arc<dyn ChatBackend>>, config: GatewayConfig, cache: CompletionCache) -> Self {
        let slots = Slots::new(config.concurrency);
        Self {
            backend,
            config,
            prompts: PromptSet::builtin(),
            cache,
            slots,
            counters: Counters::default(),
        }
    }

    /// Gateway over an explicit backend with an in-memory cache.
    pub fn with_backend(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        Self::new(Some(backend), config, CompletionCache::in_memory())
    }

    pub fn unconfigured() -> Self {
        Self::new(None, GatewayConfig::default(), CompletionCache::in_memory())
    }

    /// Builds the backend, cache and prompt set described by `config`.
    /// Paths are expected to be resolved already.
    pub fn from_config(config: GatewayConfig) -> Result<Self, GatewayError> {
        let backend: Option<Arc<dyn ChatBackend>> = match config.backend {
            None => None,
            Some(BackendKind::Mock) => {
                let mut mock = MockBackend::new(config.mock.embed_dim, config.mock.seed);
                if let Some(path) = &config.mock.fixtures {
                    let fixtures = MockBackend::load_fixtures(path)
                        .map_err(|e| GatewayError::Config(format!("mock fixtures {}: {e}", path.display())))?;
                    mock = mock.with_fixtures(fixtures);
                }
                if let Some(path) = &config.mock.rules {
                    let rules = MockBackend::load_rules(path)
                        .map_err(|e| GatewayError::Config(format!("mock rules {}: {e}", path.display())))?;
                    mock = mock.with_rules(rules);
                }
                Some(Arc::new(mock))
            }
            Some(BackendKind::Remote) => {
                let base = config
                    .base_url
                    .as_deref()
                    .ok_or_else(|| GatewayError::Config("remote backend needs base_url".into()))?;
                let key = std::env::var(&config.api_key_env).ok();
                Some(Arc::new(RemoteBackend::new(
                    base,
                    key,
                    Duration::from_secs(config.timeout_secs.max(1)),
                )))
            }
        };
        let cache = match &config.cache_path {
            Some(path) => CompletionCache::open(path)
                .map_err(|e| GatewayError::Config(format!("cache {}: {e}", path.display())))?,
            None => CompletionCache::in_memory(),
        };
        let prompts = match &config.prompts_dir {
            Some(dir) => PromptSet::with_overrides(dir)?,
            None => PromptSet::builtin(),
        };
        let mut gateway = Self::new(backend, config, cache);
        gateway.prompts = prompts;
        Ok(gateway)
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn set_prompts(&mut self, prompts: PromptSet) {
        self.prompts = prompts;
    }

    pub fn cache(&self) -> &CompletionCache {
        &self.cache
    }

    pub fn stats(&self) -> GatewayStats {
        let c = &self.counters;
        GatewayStats {
            completions: c.completions.load(Ordering::Relaxed),
            cache_hits: c.cache_hits.load(Ordering::Relaxed),
            backend_calls: c.backend_calls.load(Ordering::Relaxed),
            retries: c.retries.load(Ordering::Relaxed),
            reasks: c.reasks.load(Ordering::Relaxed),
            failures: c.failures.load(Ordering::Relaxed),
        }
    }

    /// A request for `id` carrying the configured decoding for that stage.
    pub fn request(&self, id: TemplateId) -> CompletionRequest {
        let decoding = self.config.decoding.get(&id).copied().unwrap_or_default();
        CompletionRequest::new(id).decoding(decoding)
    }

    pub fn render(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        Ok(self.prompts.render(req)?)
    }

    fn backend(&self) -> Result<&Arc<dyn ChatBackend>, GatewayError> {
        self.backend
            .as_ref()
            .ok_or_else(|| GatewayError::Config("no backend configured (set backend to remote or mock)".into()))
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, GatewayError> {
        let max = self.config.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            self.counters.backend_calls.fetch_add(1, Ordering::Relaxed);
            let result = {
                let _slot = self.slots.acquire();
                call()
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < max => {
                    log::warn!("backend attempt {attempt}/{max} failed: {e}");
                    self.counters.retries.fetch_add(1, Ordering::Relaxed);
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(source) => {
                    self.counters.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(GatewayError::Backend {
                        attempts: attempt,
                        source,
                    });
                }
            }
        }
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        let backend = self.backend()?;
        let prompt = self.render(req)?;
        let model = self.config.model_for(req.template_id);
        let key = cache_key(model, &prompt, &req.decoding);
        self.counters.completions.fetch_add(1, Ordering::Relaxed);
        if let Some(text) = self.cache.get(&key) {
            self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Completion { text, cache_hit: true });
        }
        let text = self.with_retries(|| {
            let text = backend.complete(model, &prompt, req)?;
            if text.trim().is_empty() {
                return Err(BackendError::Refusal);
            }
            Ok(text)
        })?;
        if let Err(e) = self.cache.put(&key, model, &text) {
            log::warn!("could not append to completion cache: {e}");
        }
        Ok(Completion { text, cache_hit: false })
    }

    /// Completes and parses, re-asking once with the parse error appended.
    pub fn complete_parsed<T>(
        &self,
        req: &CompletionRequest,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<T, GatewayError> {
        let first = self.complete(req)?;
        match parse(&first.text) {
            Ok(v) => Ok(v),
            Err(err) => {
                log::debug!("re-asking {} after: {err}", req.template_id.as_str());
                self.counters.reasks.fetch_add(1, Ordering::Relaxed);
                let mut retry = req.clone();
                retry.repair_note = Some(err.to_string());
                let second = self.complete(&retry)?;
                Ok(parse(&second.text)?)
            }
        }
    }

    pub fn complete_structured(
        &self,
        req: &CompletionRequest,
        schema: OutputSchema,
    ) -> Result<StructuredOutput, GatewayError> {
        self.complete_parsed(req, |raw| parse_structured_output(raw, schema))
    }

    /// One unit vector per text, in input order.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::Embedding(format!("text {i} is empty")));
        }
        let backend = self.backend()?;
        let model = &self.config.embedding_model;
        let mut out = Vec::with_capacity(texts.len());
        let mut dim = None;
        for chunk in texts.chunks(EMBED_CHUNK) {
            let raw = self.with_retries(|| backend.embed(model, chunk))?;
            if raw.len() != chunk.len() {
                return Err(GatewayError::Embedding(format!(
                    "backend returned {} vectors for {} texts",
                    raw.len(),
                    chunk.len()
                )));
            }
            for values in raw {
                let d = *dim.get_or_insert(values.len());
                if values.len() != d {
                    return Err(GatewayError::Embedding(format!(
                        "dimension mismatch in batch: {} vs {d}",
                        values.len()
                    )));
                }
                let v = EmbeddingVector::new(values)
                    .ok_or_else(|| GatewayError::Embedding("backend returned a zero or non-finite vector".into()))?;
                out.push(v);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct Flaky {
        failures_left: AtomicUsize,
        error: BackendError,
        reply: String,
        calls: AtomicUsize,
    }

    impl Flaky {
        fn new(failures: usize, error: BackendError, reply: &str) -> Self {
            Self {
                failures_left: AtomicUsize::new(failures),
                error,
                reply: reply.into(),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ChatBackend for Flaky {
        fn complete(&self, _: &str, _: &str, _: &CompletionRequest) -> Result<String, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let left = self.failures_left.load(Ordering::SeqCst);
            if left > 0 {
                self.failures_left.store(left - 1, Ordering::SeqCst);
                return Err(self.error.clone());
            }
            Ok(self.reply.clone())
        }

        fn embed(&self, _: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
            Ok(texts.iter().enumerate().map(|(i, _)| vec![1.0; i + 1]).collect())
        }
    }

    fn quick_config() -> GatewayConfig {
        GatewayConfig {
            backoff_ms: 0,
            ..GatewayConfig::mock()
        }
    }

    fn filter_req(gw: &Gateway, text: &str) -> CompletionRequest {
        gw.request(TemplateId::RelevanceFilter)
            .var("text", text)
            .with_defaults(&PromptDefaults::default())
    }

    #[test]
    fn fixture_passthrough_and_cache_hit() {
        let mut mock = MockBackend::default();
        let gw0 = Gateway::unconfigured();
        let req = filter_req(&gw0, "promptA");
        mock.insert_fixture(&gw0.render(&req).unwrap(), "[]");
        let gw = Gateway::with_backend(Arc::new(mock), quick_config());
        let first = gw.complete(&req).unwrap();
        assert_eq!(first, Completion { text: "[]".into(), cache_hit: false });
        let second = gw.complete(&req).unwrap();
        assert_eq!(second.text, first.text);
        assert!(second.cache_hit);
        assert_eq!(gw.stats().cache_hit_rate(), Some(0.5));
    }

    #[test]
    fn unconfigured_backend_is_config_error() {
        let gw = Gateway::unconfigured();
        let req = filter_req(&gw, "x");
        assert!(matches!(gw.complete(&req), Err(GatewayError::Config(_))));
        assert!(matches!(gw.embed_batch(&["a".into()]), Err(GatewayError::Config(_))));
    }

    #[test]
    fn transport_failures_retry_up_to_three_attempts() {
        let ok_after_two = Arc::new(Flaky::new(2, BackendError::Transport("reset".into()), "yes"));
        let gw = Gateway::with_backend(ok_after_two.clone(), quick_config());
        assert_eq!(gw.complete(&filter_req(&gw, "a")).unwrap().text, "yes");
        assert_eq!(ok_after_two.calls.load(Ordering::SeqCst), 3);

        let always = Arc::new(Flaky::new(10, BackendError::Status { code: 503, body: String::new() }, "yes"));
        let gw = Gateway::with_backend(always.clone(), quick_config());
        match gw.complete(&filter_req(&gw, "a")) {
            Err(GatewayError::Backend { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(always.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_and_refusals_do_not_retry() {
        let bad = Arc::new(Flaky::new(1, BackendError::Status { code: 400, body: String::new() }, "yes"));
        let gw = Gateway::with_backend(bad.clone(), quick_config());
        assert!(gw.complete(&filter_req(&gw, "a")).is_err());
        assert_eq!(bad.calls.load(Ordering::SeqCst), 1);

        let empty = Arc::new(Flaky::new(0, BackendError::Refusal, "   "));
        let gw = Gateway::with_backend(empty, quick_config());
        match gw.complete(&filter_req(&gw, "a")) {
            Err(GatewayError::Backend { source, .. }) => assert_eq!(source, BackendError::Refusal),
            other => panic!("empty content must be an error, got {other:?}"),
        }
    }

    #[test]
    fn schema_failure_reasks_once_with_note() {
        let gw0 = Gateway::unconfigured();
        let req = filter_req(&gw0, "t");
        let first_prompt = gw0.render(&req).unwrap();
        let mut mock = MockBackend::default();
        mock.insert_fixture(&first_prompt, "not json");
        let mut repaired = req.clone();
        repaired.repair_note = Some(parse::parse_reassign_array("not json").unwrap_err().to_string());
        mock.insert_fixture(&gw0.render(&repaired).unwrap(), r#"[{"topic":"A2"}]"#);
        let gw = Gateway::with_backend(Arc::new(mock), quick_config());
        let out = gw.complete_structured(&req, OutputSchema::ReassignArray).unwrap();
        assert_eq!(out, StructuredOutput::Reassign(vec!["A2".into()]));
        assert_eq!(gw.stats().reasks, 1);
    }

    #[test]
    fn embed_batch_normalizes_and_rejects_mixed_dimensions() {
        let gw = Gateway::with_backend(Arc::new(MockBackend::new(16, 1)), quick_config());
        let texts: Vec<String> = vec!["a".into(), "b".into(), "a".into()];
        let vs = gw.embed_batch(&texts).unwrap();
        assert_eq!(vs.len(), 3);
        assert_eq!(vs[0], vs[2]);
        assert_ne!(vs[0], vs[1]);
        for v in &vs {
            assert!((v.norm() - 1.0).abs() <= 1e-9);
        }
        let mixed = Gateway::with_backend(Arc::new(Flaky::new(0, BackendError::Refusal, "")), quick_config());
        assert!(matches!(mixed.embed_batch(&texts), Err(GatewayError::Embedding(_))));
    }

    #[test]
    fn in_flight_calls_respect_bound() {
        struct Slow {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for Slow {
            fn complete(&self, _: &str, p: &str, _: &CompletionRequest) -> Result<String, BackendError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok(p.len().to_string())
            }
            fn embed(&self, _: &str, _: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
                unreachable!()
            }
        }
        let slow = Arc::new(Slow {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = Gateway::with_backend(
            slow.clone(),
            GatewayConfig {
                concurrency: 2,
                ..quick_config()
            },
        );
        std::thread::scope(|s| {
            for i in 0..8 {
                let gw = &gw;
                s.spawn(move || gw.complete(&filter_req(gw, &format!("text {i}"))).unwrap());
            }
        });
        assert!(slow.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut cfg = GatewayConfig::mock();
        cfg.models.insert(TemplateId::TopicMerging, "judge-b".into());
        cfg.decoding.insert(
            TemplateId::InitialTopicGeneration,
            Decoding {
                temperature: 0.2,
                effort_hint: None,
            },
        );
        let text = serde_json::to_string(&cfg).unwrap();
        let back: GatewayConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model_for(TemplateId::TopicMerging), "judge-b");
        assert_eq!(back.model_for(TemplateId::TopicReassignment), "mock");
    }
}
