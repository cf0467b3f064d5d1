//! HTTP+JSON chat-completion and embedding client.
//!
//! Requests go to `{base_url}/chat/completions` as
//! `{model, messages: [{role, content}], temperature}` and the answer is read
//! from `choices[0].message.content`. Embeddings go to `{base_url}/embeddings`
//! as `{model, input: [...]}` and are read from `data[*].embedding`.

use std::time::Duration;

use serde_json::{json, Value};

use super::template::CompletionRequest;
use super::{BackendError, ChatBackend};

pub struct RemoteBackend {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            agent: config.into(),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{path}", self.base_url);
        let mut request = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send(body.to_string().as_bytes())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { code: status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("invalid JSON response: {e}")))
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, model: &str, prompt: &str, req: &CompletionRequest) -> Result<String, BackendError> {
        let mut body = json!({
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": req.decoding.temperature,
        });
        if let Some(effort) = req.decoding.effort_hint {
            body["reasoning_effort"] = serde_json::to_value(effort).expect("effort serializes");
        }
        let response = self.post("chat/completions", &body)?;
        match response.pointer("/choices/0/message/content") {
            Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
            Some(Value::String(_)) | Some(Value::Null) | None => Err(BackendError::Refusal),
            Some(other) => Err(BackendError::Protocol(format!("unexpected content {other}"))),
        }
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let response = self.post("embeddings", &json!({"model": model, "input": texts}))?;
        let Some(Value::Array(data)) = response.get("data") else {
            return Err(BackendError::Protocol("embedding response has no data array".into()));
        };
        let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
            let vector: Vec<f64> = serde_json::from_value(item.get("embedding").cloned().unwrap_or(Value::Null))
                .map_err(|e| BackendError::Protocol(format!("bad embedding: {e}")))?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        if rows.len() != texts.len() {
            return Err(BackendError::Protocol(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                rows.len()
            )));
        }
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}
