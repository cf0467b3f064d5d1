//! Label codebooks for the three annotation dimensions and the per-sample
//! annotation record.
//!
//! A [`Codebook`] is a two-level taxonomy: categories holding coded entries.
//! Entries flagged `others` are catch-all codes. Codebooks are loaded from JSON
//! so they can be edited or replaced for other domains; the climate topic
//! taxonomy and the intent/form question taxonomy ship with the crate.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("reading taxonomy {path}: {message}")]
    Load { path: String, message: String },
    #[error("duplicate code {0}")]
    DuplicateCode(String),
    #[error("taxonomy {0:?} has no others code")]
    NoOthers(Dimension),
    #[error("intent {0} has no primary knowledge dimension")]
    MissingKnowledge(String),
    #[error("unknown {dimension:?} code {code:?}")]
    UnknownCode { dimension: Dimension, code: String },
    #[error("expected {expected} codes in {dimension:?}, found {found}")]
    Shape {
        dimension: Dimension,
        expected: usize,
        found: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Topic,
    Intent,
    Form,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Topic, Dimension::Intent, Dimension::Form];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Topic => "topic",
            Dimension::Intent => "intent",
            Dimension::Form => "form",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bloom-style knowledge dimensions attached to intents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Knowledge {
    #[serde(rename = "F")]
    Factual,
    #[serde(rename = "C")]
    Conceptual,
    #[serde(rename = "P")]
    Procedural,
    #[serde(rename = "M")]
    Metacognitive,
}

impl Knowledge {
    pub const ALL: [Knowledge; 4] = [
        Knowledge::Factual,
        Knowledge::Conceptual,
        Knowledge::Procedural,
        Knowledge::Metacognitive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeMap {
    pub primary: Vec<Knowledge>,
    #[serde(default)]
    pub auxiliary: Vec<Knowledge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub code: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub others: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<KnowledgeMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub code: String,
    pub name: String,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub dimension: Dimension,
    /// When true, others codes keep their (zeroed) slot in distribution vectors
    /// even when excluded from an analysis, so vector length never changes.
    #[serde(default)]
    pub zero_fill_others: bool,
    pub categories: Vec<Category>,
    #[serde(skip)]
    index: HashMap<String, (usize, usize)>,
}

const BUILTIN_TOPICS: &str = include_str!("../data/topics.json");
const BUILTIN_INTENTS: &str = include_str!("../data/intents.json");
const BUILTIN_FORMS: &str = include_str!("../data/forms.json");

impl Codebook {
    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        let book: Codebook = serde_json::from_str(text).map_err(|e| TaxonomyError::Load {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        book.validated()
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TaxonomyError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            TaxonomyError::Load { message, .. } => TaxonomyError::Load {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn builtin(dimension: Dimension) -> Self {
        let text = match dimension {
            Dimension::Topic => BUILTIN_TOPICS,
            Dimension::Intent => BUILTIN_INTENTS,
            Dimension::Form => BUILTIN_FORMS,
        };
        Self::from_json(text).expect("builtin taxonomy is valid")
    }

    fn validated(mut self) -> Result<Self, TaxonomyError> {
        let mut index = HashMap::new();
        let mut cat_codes = BTreeSet::new();
        for (ci, cat) in self.categories.iter().enumerate() {
            if !cat_codes.insert(cat.code.clone()) {
                return Err(TaxonomyError::DuplicateCode(cat.code.clone()));
            }
            for (ei, entry) in cat.entries.iter().enumerate() {
                if index.insert(entry.code.clone(), (ci, ei)).is_some() {
                    return Err(TaxonomyError::DuplicateCode(entry.code.clone()));
                }
                if self.dimension == Dimension::Intent
                    && !entry.others
                    && entry.knowledge.as_ref().is_none_or(|k| k.primary.is_empty())
                {
                    return Err(TaxonomyError::MissingKnowledge(entry.code.clone()));
                }
            }
        }
        if !self.entries().any(|e| e.others) {
            return Err(TaxonomyError::NoOthers(self.dimension));
        }
        self.index = index;
        Ok(self)
    }

    /// Checks the standard shape: 25 topics plus one others code, or 29
    /// intent/form types plus nine others codes.
    pub fn check_standard_shape(&self) -> Result<(), TaxonomyError> {
        let (fine, others) = match self.dimension {
            Dimension::Topic => (25, 1),
            Dimension::Intent | Dimension::Form => (29, 9),
        };
        let found_fine = self.entries().filter(|e| !e.others).count();
        let found_others = self.entries().filter(|e| e.others).count();
        if found_fine != fine {
            return Err(TaxonomyError::Shape {
                dimension: self.dimension,
                expected: fine,
                found: found_fine,
            });
        }
        if found_others != others {
            return Err(TaxonomyError::Shape {
                dimension: self.dimension,
                expected: others,
                found: found_others,
            });
        }
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.categories.iter().flat_map(|c| c.entries.iter())
    }

    pub fn entry(&self, code: &str) -> Option<&Entry> {
        self.index
            .get(code)
            .map(|&(ci, ei)| &self.categories[ci].entries[ei])
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }

    pub fn is_others(&self, code: &str) -> bool {
        self.entry(code).is_some_and(|e| e.others)
    }

    pub fn category_of(&self, code: &str) -> Option<&str> {
        self.index
            .get(code)
            .map(|&(ci, _)| self.categories[ci].code.as_str())
    }

    /// Codes occupying a distribution vector, in taxonomy order.
    ///
    /// Others codes are present when `include_others` is set, or always when the
    /// codebook zero-fills them.
    pub fn vector_codes(&self, include_others: bool) -> Vec<String> {
        self.entries()
            .filter(|e| !e.others || include_others || self.zero_fill_others)
            .map(|e| e.code.clone())
            .collect()
    }

    /// Category codes occupying a rolled-up vector, in taxonomy order. A category
    /// whose entries are all others codes is dropped unless others are kept.
    pub fn vector_categories(&self, include_others: bool) -> Vec<String> {
        self.categories
            .iter()
            .filter(|c| include_others || self.zero_fill_others || c.entries.iter().any(|e| !e.others))
            .map(|c| c.code.clone())
            .collect()
    }

    /// Maps a judge label such as `"INTENT_1a. Fact Lookup"` or `"A5. Climate Modeling"`
    /// to its code.
    pub fn parse_label(&self, label: &str) -> Result<String, TaxonomyError> {
        let trimmed = label.trim();
        if self.contains(trimmed) {
            return Ok(trimmed.to_string());
        }
        let head = trimmed
            .split(|c: char| c == '.' || c.is_whitespace())
            .next()
            .unwrap_or("");
        if self.contains(head) {
            return Ok(head.to_string());
        }
        // names are accepted too, as judges sometimes drop the code
        if let Some(e) = self.entries().find(|e| e.name.eq_ignore_ascii_case(trimmed)) {
            return Ok(e.code.clone());
        }
        Err(TaxonomyError::UnknownCode {
            dimension: self.dimension,
            code: trimmed.to_string(),
        })
    }

    /// Human-readable listing used inside classification prompts.
    pub fn render_listing(&self) -> String {
        let mut out = String::new();
        for cat in &self.categories {
            out.push_str(&format!("{}. {}\n", cat.code, cat.name));
            for e in &cat.entries {
                if e.description.is_empty() {
                    out.push_str(&format!("  - {}. {}\n", e.code, e.name));
                } else {
                    out.push_str(&format!("  - {}. {}: {}\n", e.code, e.name, e.description));
                }
            }
        }
        out
    }

    pub fn display_label(&self, code: &str) -> String {
        match self.entry(code) {
            Some(e) => format!("{}. {}", e.code, e.name),
            None => code.to_string(),
        }
    }
}

/// The two question-type codebooks.
#[derive(Clone, Debug)]
pub struct QuestionTaxonomy {
    pub intents: Codebook,
    pub forms: Codebook,
}

impl QuestionTaxonomy {
    pub fn builtin() -> Self {
        Self {
            intents: Codebook::builtin(Dimension::Intent),
            forms: Codebook::builtin(Dimension::Form),
        }
    }
}

/// Per-dimension flags marking labels fixed by the dataset rather than a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedFlags {
    #[serde(default)]
    pub topic: bool,
    #[serde(default)]
    pub intent: bool,
    #[serde(default)]
    pub form: bool,
}

/// Ranked labels for one sample. A dimension is `None` until annotated.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topics: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intents: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forms: Option<Vec<String>>,
    #[serde(default)]
    pub fixed: FixedFlags,
}

impl AnnotationRecord {
    pub fn labels(&self, dimension: Dimension) -> Option<&[String]> {
        match dimension {
            Dimension::Topic => self.topics.as_deref(),
            Dimension::Intent => self.intents.as_deref(),
            Dimension::Form => self.forms.as_deref(),
        }
    }
}

/// Drops repeated codes keeping the first (highest-ranked) occurrence.
pub fn dedup_ranked(codes: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    codes.into_iter().filter(|c| seen.insert(c.clone())).collect()
}
