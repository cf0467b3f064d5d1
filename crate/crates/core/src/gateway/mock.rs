//! Deterministic offline backend.
//!
//! Completions come from a fixture map (SHA-256 of the rendered prompt to
//! response text) and, for prompts without a fixture, from an optional
//! keyword rule set that answers every template in its expected output shape.
//! Embeddings are feature-hashed bags of words, so texts sharing words are
//! close and identical texts map to identical vectors on every machine.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::template::{CompletionRequest, TemplateId};
use super::{BackendError, ChatBackend};
use crate::io::sha256_hex;

/// Key under which a fixture response is stored.
pub fn prompt_hash(rendered_prompt: &str) -> String {
    sha256_hex(rendered_prompt.as_bytes())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeywordTopic {
    pub keywords: Vec<String>,
    pub topic: String,
    pub explanation: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeywordCode {
    pub keywords: Vec<String>,
    pub code: String,
}

/// Keyword rules answering each template deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockRules {
    #[serde(default)]
    pub topics: Vec<KeywordTopic>,
    /// Labels in one group are near-duplicates and merge into the anchor.
    #[serde(default)]
    pub merge_groups: Vec<Vec<String>>,
    #[serde(default)]
    pub reassign: Vec<KeywordCode>,
    #[serde(default = "default_others_topic")]
    pub others_topic: String,
    #[serde(default)]
    pub intents: Vec<KeywordCode>,
    #[serde(default = "default_intent")]
    pub default_intent: String,
    #[serde(default)]
    pub forms: Vec<KeywordCode>,
    #[serde(default = "default_form")]
    pub default_form: String,
    #[serde(default)]
    pub relevant_keywords: Vec<String>,
}

impl Default for MockRules {
    fn default() -> Self {
        Self {
            topics: Vec::new(),
            merge_groups: Vec::new(),
            reassign: Vec::new(),
            others_topic: default_others_topic(),
            intents: Vec::new(),
            default_intent: default_intent(),
            forms: Vec::new(),
            default_form: default_form(),
            relevant_keywords: Vec::new(),
        }
    }
}

fn default_others_topic() -> String {
    "F1".into()
}
fn default_intent() -> String {
    "INTENT_1a".into()
}
fn default_form() -> String {
    "FORM_2a".into()
}

fn matches_any(text: &str, keywords: &[String]) -> bool {
    keywords.iter().any(|k| text.contains(&k.to_lowercase()))
}

fn matching_codes(text: &str, rules: &[KeywordCode]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for rule in rules {
        if out.len() == 3 {
            break;
        }
        if matches_any(text, &rule.keywords) && !out.contains(&rule.code) {
            out.push(rule.code.clone());
        }
    }
    out
}

impl MockRules {
    fn text<'a>(req: &'a CompletionRequest) -> Result<&'a str, BackendError> {
        req.vars
            .get("text")
            .map(String::as_str)
            .ok_or_else(|| BackendError::Protocol("mock rules need a bound {text}".into()))
    }

    fn group_of(&self, label: &str) -> Option<usize> {
        self.merge_groups.iter().position(|g| g.iter().any(|l| l == label))
    }

    pub fn respond(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        match req.template_id {
            TemplateId::InitialTopicGeneration => {
                let text = Self::text(req)?.to_lowercase();
                let topics: Vec<Value> = self
                    .topics
                    .iter()
                    .filter(|t| matches_any(&text, &t.keywords))
                    .take(3)
                    .map(|t| json!({"topic": t.topic, "explanation": t.explanation}))
                    .collect();
                if topics.is_empty() {
                    Ok(json!([{"topic": "Irrelevant Data", "explanation": "None"}]).to_string())
                } else {
                    Ok(Value::Array(topics).to_string())
                }
            }
            TemplateId::TopicMerging => {
                let raw = req
                    .vars
                    .get("topics_json")
                    .ok_or_else(|| BackendError::Protocol("mock rules need {topics_json}".into()))?;
                let items: Vec<Value> =
                    serde_json::from_str(raw).map_err(|e| BackendError::Protocol(e.to_string()))?;
                let field = |v: &Value, k: &str| v.get(k).and_then(Value::as_str).unwrap_or("").to_string();
                let anchor = items
                    .first()
                    .ok_or_else(|| BackendError::Protocol("empty topic list".into()))?;
                let anchor_label = field(anchor, "topic");
                let group = self.group_of(&anchor_label);
                let merged: Vec<String> = items[1..]
                    .iter()
                    .filter(|c| group.is_some() && self.group_of(&field(c, "topic")) == group)
                    .map(|c| field(c, "id"))
                    .collect();
                Ok(json!({
                    "merged_ids": merged,
                    "parent_topic": anchor_label,
                    "parent_explanation": field(anchor, "explanation"),
                })
                .to_string())
            }
            TemplateId::TopicReassignment => {
                let text = Self::text(req)?.to_lowercase();
                let mut codes = matching_codes(&text, &self.reassign);
                if codes.is_empty() {
                    codes.push(self.others_topic.clone());
                }
                let items: Vec<Value> = codes.into_iter().map(|c| json!({"topic": c})).collect();
                Ok(Value::Array(items).to_string())
            }
            TemplateId::QuestionTypeClassification => {
                let text = Self::text(req)?.to_lowercase();
                let mut intents = matching_codes(&text, &self.intents);
                if intents.is_empty() {
                    intents.push(self.default_intent.clone());
                }
                let mut forms = matching_codes(&text, &self.forms);
                if forms.is_empty() {
                    forms.push(self.default_form.clone());
                }
                Ok(json!({"intent": intents, "form": forms}).to_string())
            }
            TemplateId::RelevanceFilter => {
                let text = Self::text(req)?.to_lowercase();
                Ok(if matches_any(&text, &self.relevant_keywords) { "yes" } else { "no" }.to_string())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MockBackend {
    fixtures: HashMap<String, String>,
    rules: Option<MockRules>,
    embed_dim: usize,
    seed: u64,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(64, 0)
    }
}

impl MockBackend {
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        Self {
            fixtures: HashMap::new(),
            rules: None,
            embed_dim: embed_dim.max(1),
            seed,
        }
    }

    pub fn with_fixtures(mut self, fixtures: HashMap<String, String>) -> Self {
        self.fixtures.extend(fixtures);
        self
    }

    pub fn with_rules(mut self, rules: MockRules) -> Self {
        self.rules = Some(rules);
        self
    }

    /// Registers a response for an exact rendered prompt.
    pub fn insert_fixture(&mut self, rendered_prompt: &str, response: &str) {
        self.fixtures.insert(prompt_hash(rendered_prompt), response.to_string());
    }

    pub fn load_fixtures(path: &Path) -> std::io::Result<HashMap<String, String>> {
        crate::io::read_json(path)
    }

    pub fn load_rules(path: &Path) -> std::io::Result<MockRules> {
        crate::io::read_json(path)
    }

    fn hashed_vector(&self, namespace: &str, token: &str) -> Vec<f64> {
        let mut seed_bytes: [u8; 32] = Sha256::digest(format!("{namespace}\u{0}{token}").as_bytes()).into();
        for (i, b) in self.seed.to_le_bytes().iter().enumerate() {
            seed_bytes[i] ^= b;
        }
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        (0..self.embed_dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    /// Sum of per-token vectors plus a small whole-text component.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let lowered = text.to_lowercase();
        let mut acc = self.hashed_vector("text", &crate::io::normalize_whitespace(&lowered));
        for v in acc.iter_mut() {
            *v *= 0.25;
        }
        for token in lowered.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            for (a, t) in acc.iter_mut().zip(self.hashed_vector("token", token)) {
                *a += t;
            }
        }
        acc
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, _model: &str, prompt: &str, req: &CompletionRequest) -> Result<String, BackendError> {
        if let Some(resp) = self.fixtures.get(&prompt_hash(prompt)) {
            return Ok(resp.clone());
        }
        match &self.rules {
            Some(rules) => rules.respond(req),
            None => Err(BackendError::NoFixture(prompt_hash(prompt))),
        }
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}
