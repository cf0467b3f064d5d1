use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use corpusalign::gateway::{BackendError, ChatBackend, CompletionRequest, Gateway, GatewayConfig, TemplateId};
use corpusalign::pipeline::{Pipeline, QuestionTypeRow, RunOptions, Stage, TopicAnnotationRow};
use serde_json::json;

const WATER: &str = "Water management is a critical adaptation strategy for climate change. Which of the following does not support this position A. Technology should focus on use of marine water resources B. Finding alternative water stores C. Implementing legislation to ensure the 'fair' distribution of water D. Increasing water conservation in periods of water surplus";
const R454C: &str = "What is the Global Warming Potential of R-454C?";
const REDDIT: &str = "Former climate change denier here. This has been the hottest winter I’ve experienced (in Texas). Is this a result of climate change or a coincidence? Not being sarcastic. I’ve noticed that, at least in the part of Texas I’m in right now, it’s been in the 80s for most of winter. It got below freezing today, but is expecting to go back into the 80s later this week. I know there’s a difference between weather and climate, but I’ve never seen anything this erratic and weird. Y’all know more than me, so I’m interested in your thoughts.";
const IPCC: &str = "CMIP5 models with a model top within the stratosphere seriously underestimate the amplitude of the variability of the wintertime NAM expression in the stratosphere, in contrast to CMIP5 models which extend well above the stratopause (Lee and Black, 2015).";

/// Replays judge outputs keyed on (template, sample text) and records every call.
struct Fixture {
    responses: HashMap<(TemplateId, String), String>,
    calls: Mutex<Vec<(TemplateId, String)>>,
    misses: AtomicUsize,
}

impl ChatBackend for Fixture {
    fn complete(&self, _: &str, _: &str, req: &CompletionRequest) -> Result<String, BackendError> {
        let text = req.vars.get("text").cloned().unwrap_or_default();
        self.calls.lock().unwrap().push((req.template_id, text.clone()));
        self.responses.get(&(req.template_id, text)).cloned().ok_or_else(|| {
            self.misses.fetch_add(1, Ordering::SeqCst);
            BackendError::NoFixture(format!("{:?}", req.template_id))
        })
    }

    fn embed(&self, _: &str, _: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Err(BackendError::Protocol("no embeddings in this fixture".into()))
    }
}

fn fixture() -> Fixture {
    let topics = |labels: &[&str]| json!(labels.iter().map(|l| json!({"topic": l})).collect::<Vec<_>>()).to_string();
    let qt = |intents: &[&str], forms: &[&str]| json!({"intent": intents, "form": forms}).to_string();
    let mut r = HashMap::new();
    let mut add = |t: TemplateId, text: &str, out: String| {
        r.insert((t, text.to_string()), out);
    };
    add(
        TemplateId::TopicReassignment,
        WATER,
        topics(&["C2. Water Resources & Hydrological Impacts", "D5. Natural Resource Management & Conservation"]),
    );
    add(TemplateId::QuestionTypeClassification, WATER, qt(&["INTENT_1a. Fact Lookup"], &["FORM_7a. Multiple Choice"]));
    add(TemplateId::TopicReassignment, R454C, topics(&["A2. Greenhouse Gas & Biogeochemical Cycles"]));
    add(
        TemplateId::QuestionTypeClassification,
        R454C,
        qt(&["INTENT_1a. Fact Lookup"], &["FORM_1a. Concise Value(s) / Entity(ies)"]),
    );
    add(TemplateId::TopicReassignment, REDDIT, topics(&["A4. Extreme Weather Events"]));
    add(
        TemplateId::QuestionTypeClassification,
        REDDIT,
        qt(
            &["INTENT_2a. Reasoning / Causal Analysis", "INTENT_1c. Clarification / Verification"],
            &["FORM_2a. Concise Paragraph", "FORM_3a. Item List"],
        ),
    );
    add(
        TemplateId::TopicReassignment,
        IPCC,
        topics(&["A5. Climate Modeling", "A1. Atmospheric Science & Climate Processes"]),
    );
    Fixture {
        responses: r,
        calls: Mutex::new(Vec::new()),
        misses: AtomicUsize::new(0),
    }
}

fn write_jsonl(path: &std::path::Path, rows: &[serde_json::Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(path, text).unwrap();
}

/// Runs the annotation stages over the published examples with replayed judge
/// outputs and checks the stored codes. Panics on any mismatch.
pub fn check_published_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_jsonl(
        &d.join("wildchat.jsonl"),
        &[json!({"turns": [{"role": "user", "content": WATER}, {"role": "assistant", "content": "B"}]})],
    );
    write_jsonl(&d.join("climateqa.jsonl"), &[json!({"text": R454C})]);
    write_jsonl(&d.join("reddit.jsonl"), &[json!({"text": REDDIT})]);
    write_jsonl(&d.join("ipcc.jsonl"), &[json!({"text": IPCC})]);
    let config = json!({
        "datasets": [
            {"dataset_id": "wildchat", "display_name": "WildChat", "category": "human_to_ai_query",
             "path": "wildchat.jsonl", "format": "jsonl_conversation"},
            {"dataset_id": "climateqa", "display_name": "ClimateQ&A", "category": "human_to_ai_query",
             "path": "climateqa.jsonl", "format": "jsonl_text_field"},
            {"dataset_id": "reddit", "display_name": "Reddit", "category": "human_to_human_question",
             "path": "reddit.jsonl", "format": "jsonl_text_field"},
            {"dataset_id": "ipcc", "display_name": "IPCC AR6", "category": "human_to_human_provision",
             "path": "ipcc.jsonl", "format": "jsonl_text_field",
             "fixed": {"intents": ["INTENT_9z"], "forms": ["FORM_9z"]}}
        ]
    });
    std::fs::write(d.join("config.json"), config.to_string()).unwrap();

    let p = Pipeline::from_file(
        &d.join("config.json"),
        RunOptions {
            workdir: Some(d.join("work")),
            ..Default::default()
        },
    )
    .unwrap();
    let backend = Arc::new(fixture());
    p.set_gateway(Gateway::with_backend(backend.clone(), GatewayConfig::mock()));
    p.run(&[Stage::Ingest, Stage::Filter, Stage::Reassign, Stage::Classify]).unwrap();
    assert_eq!(backend.misses.load(Ordering::SeqCst), 0);

    let topics: Vec<TopicAnnotationRow> = corpusalign::io::read_jsonl(&d.join("work/annotate/topics.jsonl")).unwrap();
    let qts: Vec<QuestionTypeRow> = corpusalign::io::read_jsonl(&d.join("work/annotate/question_types.jsonl")).unwrap();
    let topic_of = |ds: &str| topics.iter().find(|r| r.dataset_id == ds).unwrap().topics.clone().unwrap();
    let qt_of = |ds: &str| {
        let r = qts.iter().find(|r| r.dataset_id == ds).unwrap();
        (r.intents.clone().unwrap(), r.forms.clone().unwrap(), r.intent_fixed && r.form_fixed)
    };

    assert_eq!(topic_of("climateqa"), ["A2"]);
    assert_eq!(qt_of("climateqa"), (vec!["INTENT_1a".to_string()], vec!["FORM_1a".to_string()], false));

    assert_eq!(topic_of("wildchat"), ["C2", "D5"]);
    assert_eq!(qt_of("wildchat"), (vec!["INTENT_1a".to_string()], vec!["FORM_7a".to_string()], false));

    assert_eq!(topic_of("reddit"), ["A4"]);
    let (intents, forms, _) = qt_of("reddit");
    assert_eq!(intents, ["INTENT_2a", "INTENT_1c"]);
    assert_eq!(forms, ["FORM_2a", "FORM_3a"]);

    assert_eq!(topic_of("ipcc"), ["A5", "A1"]);
    assert_eq!(qt_of("ipcc"), (vec!["INTENT_9z".to_string()], vec!["FORM_9z".to_string()], true));
    let calls = backend.calls.lock().unwrap();
    assert!(!calls.iter().any(|(t, text)| *t == TemplateId::QuestionTypeClassification && text == IPCC));
    assert_eq!(calls.len(), 7);
}
