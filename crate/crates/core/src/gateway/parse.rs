//! Lenient extraction and strict validation of judge-model JSON output.
//!
//! Extraction tolerates code fences and surrounding prose by taking the first
//! complete JSON value in the text. Validation then enforces the shape each
//! prompt asks for. Both failure kinds carry the raw text and are retryable.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Label the initial-topic prompt uses for off-subject text.
pub const IRRELEVANT_LABEL: &str = "Irrelevant Data";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON value found: {message}")]
    Unparseable { raw: String, message: String },
    #[error("output violates schema: {message}")]
    Schema { raw: String, message: String },
}

impl ParseError {
    pub fn raw(&self) -> &str {
        match self {
            ParseError::Unparseable { raw, .. } | ParseError::Schema { raw, .. } => raw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSchema {
    TopicArray,
    MergeDecision,
    ReassignArray,
    QuestionTypeObject,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTopic {
    pub label: String,
    pub explanation: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopicArrayOutput {
    Irrelevant,
    Topics(Vec<RawTopic>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeDecision {
    pub merged_ids: Vec<String>,
    pub parent_topic: String,
    pub parent_explanation: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTypeOutput {
    pub intents: Vec<String>,
    pub forms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructuredOutput {
    Topics(TopicArrayOutput),
    Merge(MergeDecision),
    /// Topic labels as returned (e.g. `"A5. Climate Modeling"`); mapping to codes
    /// happens against a taxonomy.
    Reassign(Vec<String>),
    QuestionType(QuestionTypeOutput),
}

/// Returns the first complete JSON object or array in `raw`.
pub fn extract_json(raw: &str) -> Result<Value, ParseError> {
    let mut last_err = String::from("no '{' or '[' in output");
    for (pos, ch) in raw.char_indices() {
        if ch != '{' && ch != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(value)) => return Ok(value),
            Some(Err(e)) => last_err = e.to_string(),
            None => {}
        }
    }
    Err(ParseError::Unparseable {
        raw: raw.to_string(),
        message: last_err,
    })
}

pub fn parse_structured_output(raw: &str, schema: OutputSchema) -> Result<StructuredOutput, ParseError> {
    Ok(match schema {
        OutputSchema::TopicArray => StructuredOutput::Topics(parse_topic_array(raw)?),
        OutputSchema::MergeDecision => StructuredOutput::Merge(parse_merge_decision(raw)?),
        OutputSchema::ReassignArray => StructuredOutput::Reassign(parse_reassign_array(raw)?),
        OutputSchema::QuestionTypeObject => StructuredOutput::QuestionType(parse_question_type(raw)?),
    })
}

fn schema_err(raw: &str, message: impl Into<String>) -> ParseError {
    ParseError::Schema {
        raw: raw.to_string(),
        message: message.into(),
    }
}

fn string_field(obj: &Map<String, Value>, key: &str, raw: &str) -> Result<String, ParseError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema_err(raw, format!("{key:?} must be a string"))),
        None => Err(schema_err(raw, format!("missing {key:?}"))),
    }
}

fn check_len(raw: &str, what: &str, len: usize) -> Result<(), ParseError> {
    if !(1..=3).contains(&len) {
        return Err(schema_err(raw, format!("{what} must hold 1 to 3 items, got {len}")));
    }
    Ok(())
}

fn is_irrelevant(label: &str) -> bool {
    let l = label.trim();
    l == IRRELEVANT_LABEL || l.rsplit_once(':').is_some_and(|(_, tail)| tail.trim() == IRRELEVANT_LABEL)
}

pub fn parse_topic_array(raw: &str) -> Result<TopicArrayOutput, ParseError> {
    let Value::Array(items) = extract_json(raw)? else {
        return Err(schema_err(raw, "expected a JSON array of topics"));
    };
    check_len(raw, "topic array", items.len())?;
    let mut topics = Vec::with_capacity(items.len());
    for item in &items {
        let Value::Object(obj) = item else {
            return Err(schema_err(raw, "each topic must be an object"));
        };
        let label = string_field(obj, "topic", raw)?;
        let explanation = string_field(obj, "explanation", raw)?;
        topics.push(RawTopic { label, explanation });
    }
    let irrelevant = topics.iter().filter(|t| is_irrelevant(&t.label)).count();
    match (irrelevant, topics.len()) {
        (0, _) => Ok(TopicArrayOutput::Topics(topics)),
        (1, 1) => Ok(TopicArrayOutput::Irrelevant),
        _ => Err(schema_err(raw, "irrelevant marker must be the only element")),
    }
}

pub fn parse_merge_decision(raw: &str) -> Result<MergeDecision, ParseError> {
    let Value::Object(obj) = extract_json(raw)? else {
        return Err(schema_err(raw, "expected a JSON object"));
    };
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    if keys != ["merged_ids", "parent_explanation", "parent_topic"] {
        return Err(schema_err(
            raw,
            format!("expected exactly merged_ids, parent_topic, parent_explanation; got {keys:?}"),
        ));
    }
    let Some(Value::Array(ids)) = obj.get("merged_ids") else {
        return Err(schema_err(raw, "merged_ids must be an array"));
    };
    let mut merged_ids = Vec::with_capacity(ids.len());
    for id in ids {
        match id {
            Value::String(s) => merged_ids.push(s.trim().to_string()),
            Value::Number(n) if n.is_u64() => merged_ids.push(n.to_string()),
            _ => return Err(schema_err(raw, "merged_ids entries must be id strings")),
        }
    }
    Ok(MergeDecision {
        merged_ids,
        parent_topic: string_field(&obj, "parent_topic", raw)?,
        parent_explanation: string_field(&obj, "parent_explanation", raw)?,
    })
}

pub fn parse_reassign_array(raw: &str) -> Result<Vec<String>, ParseError> {
    let Value::Array(items) = extract_json(raw)? else {
        return Err(schema_err(raw, "expected a JSON array"));
    };
    check_len(raw, "topic array", items.len())?;
    items
        .iter()
        .map(|item| match item {
            Value::Object(obj) => string_field(obj, "topic", raw),
            Value::String(s) => Ok(s.clone()),
            _ => Err(schema_err(raw, "each item must be an object with a \"topic\" field")),
        })
        .collect()
}

fn string_list(obj: &Map<String, Value>, key: &str, raw: &str) -> Result<Vec<String>, ParseError> {
    let list = match obj.get(key) {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                _ => Err(schema_err(raw, format!("{key:?} entries must be strings"))),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(Value::String(s)) => vec![s.clone()],
        Some(_) => return Err(schema_err(raw, format!("{key:?} must be an array"))),
        None => return Err(schema_err(raw, format!("missing {key:?}"))),
    };
    check_len(raw, key, list.len())?;
    Ok(list)
}

pub fn parse_question_type(raw: &str) -> Result<QuestionTypeOutput, ParseError> {
    let Value::Object(obj) = extract_json(raw)? else {
        return Err(schema_err(raw, "expected a JSON object"));
    };
    Ok(QuestionTypeOutput {
        intents: string_list(&obj, "intent", raw)?,
        forms: string_list(&obj, "form", raw)?,
    })
}
