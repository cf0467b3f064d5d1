//! Taxonomy-constrained annotation: topic reassignment, question-type
//! classification, relevance filtering and knowledge-dimension profiles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::gateway::parse::{parse_question_type, parse_reassign_array, ParseError};
use crate::gateway::{Gateway, GatewayError, PromptDefaults, TemplateId};
use crate::taxonomy::{dedup_ranked, Codebook, Knowledge, QuestionTaxonomy};

fn to_codes(raw: &str, labels: &[String], book: &Codebook) -> Result<Vec<String>, ParseError> {
    let codes = labels
        .iter()
        .map(|l| book.parse_label(l))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ParseError::Schema {
            raw: raw.to_string(),
            message: e.to_string(),
        })?;
    Ok(dedup_ranked(codes))
}

/// Keeps the catch-all only when it is the sole answer.
fn drop_mixed_others(codes: Vec<String>, book: &Codebook) -> Vec<String> {
    if codes.iter().any(|c| !book.is_others(c)) {
        codes.into_iter().filter(|c| !book.is_others(c)).collect()
    } else {
        codes.into_iter().take(1).collect()
    }
}

/// Ranked topic codes (1-3) for a sample; the catch-all code alone when
/// nothing fits.
pub fn reassign_topics(
    gateway: &Gateway,
    sample: &SampleRecord,
    taxonomy: &Codebook,
    defaults: &PromptDefaults,
) -> Result<Vec<String>, GatewayError> {
    let others = taxonomy
        .entries()
        .find(|e| e.others)
        .map(|e| format!("{}. {}", e.code, e.name))
        .unwrap_or_default();
    let req = gateway
        .request(TemplateId::TopicReassignment)
        .var("taxonomy", taxonomy.render_listing())
        .var("others_label", others)
        .var("text", sample.text.as_str())
        .with_defaults(defaults);
    gateway.complete_parsed(&req, |raw| {
        let labels = parse_reassign_array(raw)?;
        Ok(drop_mixed_others(to_codes(raw, &labels, taxonomy)?, taxonomy))
    })
}

/// Labels a dataset assigns to every sample, bypassing the judge for that dimension.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topics: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intents: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forms: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionType {
    pub intents: Vec<String>,
    pub forms: Vec<String>,
    pub intent_fixed: bool,
    pub form_fixed: bool,
}

/// Ranked intents and forms for a sample. Dimensions fixed by the dataset are
/// copied through; the judge is called only if some dimension is not fixed.
pub fn classify_question_type(
    gateway: &Gateway,
    sample: &SampleRecord,
    taxonomy: &QuestionTaxonomy,
    fixed: &FixedLabels,
) -> Result<QuestionType, GatewayError> {
    if let (Some(intents), Some(forms)) = (&fixed.intents, &fixed.forms) {
        return Ok(QuestionType {
            intents: intents.clone(),
            forms: forms.clone(),
            intent_fixed: true,
            form_fixed: true,
        });
    }
    let req = gateway
        .request(TemplateId::QuestionTypeClassification)
        .var("intent_taxonomy", taxonomy.intents.render_listing())
        .var("form_taxonomy", taxonomy.forms.render_listing())
        .var("text", sample.text.as_str());
    let (intents, forms) = gateway.complete_parsed(&req, |raw| {
        let out = parse_question_type(raw)?;
        Ok((
            to_codes(raw, &out.intents, &taxonomy.intents)?,
            to_codes(raw, &out.forms, &taxonomy.forms)?,
        ))
    })?;
    Ok(QuestionType {
        intent_fixed: fixed.intents.is_some(),
        form_fixed: fixed.forms.is_some(),
        intents: fixed.intents.clone().unwrap_or(intents),
        forms: fixed.forms.clone().unwrap_or(forms),
    })
}

/// Weights over the four knowledge dimensions, indexed by [`Knowledge::index`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeProfile(pub [f64; 4]);

impl KnowledgeProfile {
    pub fn get(&self, k: Knowledge) -> f64 {
        self.0[k.index()]
    }
}

/// Spreads each intent's weight evenly over its primary knowledge dimensions.
/// Catch-all intents carry no knowledge and are skipped; `None` when nothing remains.
pub fn knowledge_profile(intents: &[String], weights: &[f64], taxonomy: &Codebook) -> Option<KnowledgeProfile> {
    assert_eq!(intents.len(), weights.len(), "one weight per intent");
    let mut acc = [0.0; 4];
    for (code, w) in intents.iter().zip(weights) {
        let Some(map) = taxonomy.entry(code).and_then(|e| e.knowledge.as_ref()) else {
            continue;
        };
        if map.primary.is_empty() {
            continue;
        }
        let share = w / map.primary.len() as f64;
        for k in &map.primary {
            acc[k.index()] += share;
        }
    }
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        return None;
    }
    Some(KnowledgeProfile(acc.map(|v| v / total)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceDecision {
    pub sample_id: String,
    pub keep: bool,
    /// Set when the decision is a conservative default rather than a judge answer.
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn yes_no(raw: &str) -> Option<bool> {
    let word: String = raw
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" | "true" | "related" | "relevant" => Some(true),
        "no" | "false" | "unrelated" | "irrelevant" => Some(false),
        _ => None,
    }
}

/// Keep/drop decision for one sample. Judge failures keep the sample and flag it.
pub fn filter_relevance(gateway: &Gateway, sample: &SampleRecord, defaults: &PromptDefaults) -> RelevanceDecision {
    let req = gateway
        .request(TemplateId::RelevanceFilter)
        .var("text", sample.text.as_str())
        .with_defaults(defaults);
    let mut decision = RelevanceDecision {
        sample_id: sample.sample_id.clone(),
        keep: true,
        flagged: true,
        raw: None,
        error: None,
    };
    match gateway.complete(&req) {
        Ok(c) => {
            match yes_no(&c.text) {
                Some(keep) => {
                    decision.keep = keep;
                    decision.flagged = false;
                }
                None => decision.error = Some("answer is neither yes nor no".into()),
            }
            decision.raw = Some(c.text);
        }
        Err(e) => {
            log::warn!("{}: relevance judge failed, keeping sample: {e}", sample.sample_id);
            decision.error = Some(e.to_string());
        }
    }
    decision
}

pub fn filter_samples(gateway: &Gateway, samples: &[SampleRecord], defaults: &PromptDefaults) -> Vec<RelevanceDecision> {
    samples.par_iter().map(|s| filter_relevance(gateway, s, defaults)).collect()
}

/// Outcome of annotating a batch: one result slot per input sample.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub samples: usize,
    pub annotated: usize,
    pub skipped_fixed: usize,
    pub failed: Vec<String>,
}

fn collect<T>(
    samples: &[SampleRecord],
    results: Vec<Result<T, GatewayError>>,
    summary: &mut AnnotationSummary,
) -> Result<Vec<Option<T>>, GatewayError> {
    let mut out = Vec::with_capacity(results.len());
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(v) => {
                summary.annotated += 1;
                out.push(Some(v));
            }
            Err(GatewayError::Parse(e)) => {
                log::warn!("{}: annotation failed: {e}", s.sample_id);
                summary.failed.push(s.sample_id.clone());
                out.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Topic codes for each sample (or `None` for annotation failures). Samples
/// with fixed topics are copied through without a judge call.
pub fn reassign_samples(
    gateway: &Gateway,
    samples: &[SampleRecord],
    taxonomy: &Codebook,
    defaults: &PromptDefaults,
    fixed: &FixedLabels,
) -> Result<(Vec<Option<Vec<String>>>, AnnotationSummary), GatewayError> {
    let mut summary = AnnotationSummary {
        samples: samples.len(),
        ..Default::default()
    };
    if let Some(codes) = &fixed.topics {
        summary.skipped_fixed = samples.len();
        summary.annotated = samples.len();
        return Ok((vec![Some(codes.clone()); samples.len()], summary));
    }
    let results: Vec<_> = samples
        .par_iter()
        .map(|s| reassign_topics(gateway, s, taxonomy, defaults))
        .collect();
    let out = collect(samples, results, &mut summary)?;
    Ok((out, summary))
}

pub fn classify_samples(
    gateway: &Gateway,
    samples: &[SampleRecord],
    taxonomy: &QuestionTaxonomy,
    fixed: &FixedLabels,
) -> Result<(Vec<Option<QuestionType>>, AnnotationSummary), GatewayError> {
    let mut summary = AnnotationSummary {
        samples: samples.len(),
        ..Default::default()
    };
    if fixed.intents.is_some() && fixed.forms.is_some() {
        summary.skipped_fixed = samples.len();
    }
    let results: Vec<_> = samples
        .par_iter()
        .map(|s| classify_question_type(gateway, s, taxonomy, fixed))
        .collect();
    let out = collect(samples, results, &mut summary)?;
    Ok((out, summary))
}
