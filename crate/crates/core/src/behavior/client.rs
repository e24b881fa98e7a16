use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{MediaKind, MllmClient, MllmRequest};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad response body: {0}")]
    Decode(String),
}

type Responder = dyn Fn(&MllmRequest) -> Result<String, ClientError> + Send + Sync;

/// Deterministic in-process client for tests and desk-scale runs.
pub struct MockMllmClient {
    name: String,
    respond: Box<Responder>,
    calls: AtomicUsize,
}

impl MockMllmClient {
    pub fn from_fn<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&MllmRequest) -> Result<String, ClientError> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            respond: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn fixed(name: impl Into<String>, response: impl Into<String>) -> Self {
        let response = response.into();
        Self::from_fn(name, move |_| Ok(response.clone()))
    }

    /// Returns the prompt text unchanged.
    pub fn echo(name: impl Into<String>) -> Self {
        Self::from_fn(name, |req| Ok(req.prompt_text.clone()))
    }

    pub fn failing(name: impl Into<String>) -> Self {
        Self::from_fn(name, |_| Err(ClientError::Transport("connection refused".into())))
    }

    /// Answers by looking up the first media path of the request in `table`,
    /// falling back to `default` (or a transport error when absent).
    pub fn scripted(
        name: impl Into<String>,
        table: std::collections::HashMap<String, String>,
        default: Option<String>,
    ) -> Self {
        Self::from_fn(name, move |req| {
            req.media_refs
                .iter()
                .find_map(|m| table.get(&m.path))
                .or(default.as_ref())
                .cloned()
                .ok_or_else(|| ClientError::Transport("no scripted response for request".into()))
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl MllmClient for MockMllmClient {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &MllmRequest) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.respond)(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

/// Client for an OpenAI-compatible chat completions endpoint serving a
/// vision-language model. Placeholder runs in the prompt are replaced by the
/// request's media parts.
pub struct HttpMllmClient {
    config: HttpClientConfig,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpMllmClient {
    pub fn new(config: HttpClientConfig) -> Result<Self, ClientError> {
        let token = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ClientError::Transport(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self { config, token, http })
    }

    pub fn request_body(&self, request: &MllmRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": content_parts(request) }],
            "temperature": request.generation_params.temperature,
            "max_tokens": request.generation_params.max_output_tokens,
        })
    }
}

fn media_url(path: &str) -> String {
    if path.contains("://") {
        path.to_string()
    } else {
        format!("file://{path}")
    }
}

fn media_part(kind: MediaKind, path: &str) -> Value {
    match kind {
        MediaKind::Video => json!({"type": "video_url", "video_url": {"url": media_url(path)}}),
        MediaKind::Audio => json!({"type": "audio_url", "audio_url": {"url": media_url(path)}}),
    }
}

/// Splits the prompt into text parts, substituting each `Video:` / `Audio:`
/// placeholder line with the matching media part. Media without a
/// placeholder line are appended after the text.
fn content_parts(request: &MllmRequest) -> Vec<Value> {
    let mut parts = Vec::new();
    let mut text = String::new();
    let mut used = vec![false; request.media_refs.len()];
    let flush = |text: &mut String, parts: &mut Vec<Value>| {
        if !text.is_empty() {
            parts.push(json!({"type": "text", "text": std::mem::take(text)}));
        }
    };
    for line in request.prompt_text.split_inclusive('\n') {
        let kind = if line.starts_with("Video:") && line.contains('<') {
            Some(MediaKind::Video)
        } else if line.starts_with("Audio:") && line.contains('<') {
            Some(MediaKind::Audio)
        } else {
            None
        };
        match kind {
            Some(kind) => {
                if let Some(i) = request.media_refs.iter().position(|m| m.kind == kind) {
                    flush(&mut text, &mut parts);
                    parts.push(media_part(kind, &request.media_refs[i].path));
                    used[i] = true;
                }
            }
            None => text.push_str(line),
        }
    }
    flush(&mut text, &mut parts);
    for (m, used) in request.media_refs.iter().zip(used) {
        if !used {
            parts.push(media_part(m.kind, &m.path));
        }
    }
    parts
}

impl MllmClient for HttpMllmClient {
    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &MllmRequest) -> Result<String, ClientError> {
        let mut req = self.http.post(&self.config.endpoint).json(&self.request_body(request));
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout
            } else {
                ClientError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Status { status: status.as_u16(), body });
        }
        let value: Value = serde_json::from_str(&body).map_err(|e| ClientError::Decode(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Decode(format!("no choices[0].message.content in {body}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::MediaRef;

    #[test]
    fn placeholder_lines_become_media_parts() {
        let mut req = MllmRequest::new("Title\nA: hi\nVideo: <VID> <VID>\nAudio: <AUD>\nObjective: x").unwrap();
        req.media_refs = vec![
            MediaRef { kind: MediaKind::Video, path: "/clips/1.mp4".into() },
            MediaRef { kind: MediaKind::Audio, path: "https://h/1.wav".into() },
        ];
        let parts = content_parts(&req);
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[0]["text"], "Title\nA: hi\n");
        assert_eq!(parts[1]["video_url"]["url"], "file:///clips/1.mp4");
        assert_eq!(parts[2]["audio_url"]["url"], "https://h/1.wav");
        assert_eq!(parts[3]["text"], "Objective: x");
    }

    #[test]
    fn unmatched_media_is_appended() {
        let mut req = MllmRequest::new("just text").unwrap();
        req.media_refs = vec![MediaRef { kind: MediaKind::Video, path: "v".into() }];
        let parts = content_parts(&req);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1]["type"], "video_url");
    }

    #[test]
    fn scripted_lookup_by_media_path() {
        let table = [("v1".to_string(), "one".to_string())].into_iter().collect();
        let c = MockMllmClient::scripted("s", table, None);
        let mut req = MllmRequest::new("p").unwrap();
        req.media_refs = vec![MediaRef { kind: MediaKind::Video, path: "v1".into() }];
        assert_eq!(c.complete(&req).unwrap(), "one");
        req.media_refs[0].path = "v2".into();
        assert!(c.complete(&req).is_err());
    }
}
