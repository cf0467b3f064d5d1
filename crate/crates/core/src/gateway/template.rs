//! Prompt templates with `{name}` placeholders.
//!
//! A placeholder is `{` + identifier + `}`; any other brace (for example the
//! JSON examples inside prompts) is literal text. Substitution is single-pass,
//! so bound values containing braces are never re-expanded.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unbound placeholder {0:?}")]
    Unbound(String),
    #[error("no template registered for {0:?}")]
    Missing(TemplateId),
    #[error("reading template {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    InitialTopicGeneration,
    TopicMerging,
    TopicReassignment,
    QuestionTypeClassification,
    RelevanceFilter,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::InitialTopicGeneration,
        TemplateId::TopicMerging,
        TemplateId::TopicReassignment,
        TemplateId::QuestionTypeClassification,
        TemplateId::RelevanceFilter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::InitialTopicGeneration => "initial_topic_generation",
            TemplateId::TopicMerging => "topic_merging",
            TemplateId::TopicReassignment => "topic_reassignment",
            TemplateId::QuestionTypeClassification => "question_type_classification",
            TemplateId::RelevanceFilter => "relevance_filter",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::InitialTopicGeneration => include_str!("../../data/prompts/initial_topic_generation.txt"),
            TemplateId::TopicMerging => include_str!("../../data/prompts/topic_merging.txt"),
            TemplateId::TopicReassignment => include_str!("../../data/prompts/topic_reassignment.txt"),
            TemplateId::QuestionTypeClassification => {
                include_str!("../../data/prompts/question_type_classification.txt")
            }
            TemplateId::RelevanceFilter => include_str!("../../data/prompts/relevance_filter.txt"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffortHint {
    Minimal,
    Low,
    Medium,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effort_hint: Option<EffortHint>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            effort_hint: None,
        }
    }
}

/// Default subject binding and word limits for topic prompts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDefaults {
    pub subject: String,
    pub n: usize,
    pub m: usize,
}

impl Default for PromptDefaults {
    fn default() -> Self {
        Self {
            subject: "Climate Change".to_string(),
            n: 4,
            m: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template_id: TemplateId,
    pub vars: BTreeMap<String, String>,
    #[serde(default)]
    pub decoding: Decoding,
    /// Appended after the rendered prompt when re-asking after a schema failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair_note: Option<String>,
}

impl CompletionRequest {
    pub fn new(template_id: TemplateId) -> Self {
        Self {
            template_id,
            vars: BTreeMap::new(),
            decoding: Decoding::default(),
            repair_note: None,
        }
    }

    pub fn var(mut self, name: &str, value: impl Into<String>) -> Self {
        self.vars.insert(name.to_string(), value.into());
        self
    }

    /// Binds `subject`, `n` and `m` unless already bound.
    pub fn with_defaults(mut self, defaults: &PromptDefaults) -> Self {
        self.vars
            .entry("subject".into())
            .or_insert_with(|| defaults.subject.clone());
        self.vars.entry("n".into()).or_insert_with(|| defaults.n.to_string());
        self.vars.entry("m".into()).or_insert_with(|| defaults.m.to_string());
        self
    }

    pub fn decoding(mut self, decoding: Decoding) -> Self {
        assert!(decoding.temperature >= 0.0, "temperature must be >= 0");
        self.decoding = decoding;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j].is_ascii_alphabetic() || bytes[j] == b'_') {
                j += 1;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'}' {
                    if start < i {
                        out.push(Piece::Text(&body[start..i]));
                    }
                    out.push(Piece::Slot(&body[i + 1..j]));
                    i = j + 1;
                    start = i;
                    continue;
                }
            }
        }
        i += 1;
    }
    if start < body.len() {
        out.push(Piece::Text(&body[start..]));
    }
    out
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Self {
        Self { id, body: body.into() }
    }

    /// Placeholder names the body requires.
    pub fn variables(&self) -> BTreeSet<String> {
        pieces(&self.body)
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name.to_string()),
                Piece::Text(_) => None,
            })
            .collect()
    }

    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        for piece in pieces(&self.body) {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => match vars.get(name) {
                    Some(v) => out.push_str(v),
                    None => return Err(TemplateError::Unbound(name.to_string())),
                },
            }
        }
        Ok(out)
    }
}

/// The prompt bodies used by the gateway, one per [`TemplateId`].
#[derive(Clone, Debug)]
pub struct PromptSet {
    templates: HashMap<TemplateId, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .iter()
            .map(|&id| (id, PromptTemplate::new(id, id.builtin_body())))
            .collect();
        Self { templates }
    }

    /// Builtin templates, overridden by any `<template_id>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.as_str()));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Load {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                set.insert(PromptTemplate::new(id, body));
            }
        }
        Ok(set)
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id, template);
    }

    pub fn get(&self, id: TemplateId) -> Result<&PromptTemplate, TemplateError> {
        self.templates.get(&id).ok_or(TemplateError::Missing(id))
    }

    /// Renders a request, appending its repair note if present.
    pub fn render(&self, req: &CompletionRequest) -> Result<String, TemplateError> {
        let mut text = self.get(req.template_id)?.render(&req.vars)?;
        if let Some(note) = &req.repair_note {
            text.push_str("\n\nYour previous reply could not be used: ");
            text.push_str(note);
            text.push_str("\nReply again, following the required output format exactly.");
        }
        Ok(text)
    }
}
