//! Video-derived behavior descriptions: prompting a heavyweight multimodal
//! model, parsing its answer into (facial expression, body language,
//! posture), and caching the result for the tuning stages.

mod cache;
mod client;
mod parse;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{BehaviorCache, FailureRecord};
pub use client::{ClientError, HttpClientConfig, HttpMllmClient, MockMllmClient};
pub use parse::{parse_behavior_response, BehaviorFields};

use crate::corpus::{history_window, Conversation, CorpusManifest, Utterance};
use crate::prompting::{build_behavior_prompt, StructuredTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorAnnotation {
    pub utterance_id: String,
    pub source_model: String,
    pub facial_expression: String,
    pub body_language: String,
    pub posture: String,
    pub raw_response: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Video,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRef {
    pub kind: MediaKind,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 256,
        }
    }
}

/// A text prompt plus the media it refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MllmRequest {
    pub prompt_text: String,
    pub media_refs: Vec<MediaRef>,
    pub generation_params: GenerationParams,
}

impl MllmRequest {
    pub fn new(prompt_text: impl Into<String>) -> Result<Self, BehaviorError> {
        let prompt_text = prompt_text.into();
        if prompt_text.trim().is_empty() {
            return Err(BehaviorError::Precondition("request prompt is empty".into()));
        }
        Ok(Self {
            prompt_text,
            media_refs: Vec::new(),
            generation_params: GenerationParams::default(),
        })
    }

    pub fn media_of(utt: &Utterance) -> Vec<MediaRef> {
        let mut media = Vec::new();
        if let Some(v) = &utt.video_ref {
            media.push(MediaRef { kind: MediaKind::Video, path: v.clone() });
        }
        if let Some(a) = &utt.audio_ref {
            media.push(MediaRef { kind: MediaKind::Audio, path: a.clone() });
        }
        media
    }
}

/// A hosted or local multimodal model that answers text+media prompts.
pub trait MllmClient: Send + Sync {
    fn model_name(&self) -> &str;
    fn complete(&self, request: &MllmRequest) -> Result<String, ClientError>;
}

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("missing behavior section: {0}")]
    MissingSection(&'static str),

    #[error("client failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: ClientError },

    #[error("unparseable response after {attempts} attempts: {reason}")]
    Unparseable {
        attempts: u32,
        reason: String,
        raw: String,
    },
}

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    pub max_retries: u32,
    pub backoff_base: Duration,
    /// Include preceding turns in the prompt; the default is the target only.
    pub include_history: bool,
    pub max_turns: usize,
    pub params: GenerationParams,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            include_history: false,
            max_turns: crate::corpus::DEFAULT_MAX_TURNS,
            params: GenerationParams::default(),
        }
    }
}

pub fn build_request(
    utt: &Utterance,
    conv: &Conversation,
    template: &StructuredTemplate,
    opts: &GenerationOptions,
) -> Result<MllmRequest, crate::Error> {
    let j = conv
        .utterances
        .iter()
        .position(|u| u.id == utt.id)
        .ok_or_else(|| {
            BehaviorError::Precondition(format!(
                "utterance {} is not part of conversation {}",
                utt.id, conv.id
            ))
        })?;
    let history = if opts.include_history {
        history_window(conv, j, opts.max_turns)?
    } else {
        &[]
    };
    let prompt = build_behavior_prompt(template, utt, history)?;
    let mut req = MllmRequest::new(prompt.text)?;
    req.media_refs = MllmRequest::media_of(utt);
    req.generation_params = opts.params;
    Ok(req)
}

/// Asks `client` for the behavior of `utt`, retrying transport and parse
/// failures with exponential backoff.
pub fn generate_behavior(
    client: &dyn MllmClient,
    utt: &Utterance,
    conv: &Conversation,
    template: &StructuredTemplate,
    opts: &GenerationOptions,
) -> Result<BehaviorAnnotation, crate::Error> {
    let request = build_request(utt, conv, template, opts)?;
    let attempts = opts.max_retries + 1;
    let mut last_err = None;
    for attempt in 1..=attempts {
        if attempt > 1 {
            thread::sleep(opts.backoff_base * 2u32.pow(attempt - 2));
        }
        match client.complete(&request) {
            Ok(raw) => match parse_behavior_response(&raw) {
                Ok(fields) => {
                    return Ok(BehaviorAnnotation {
                        utterance_id: utt.id.clone(),
                        source_model: client.model_name().to_string(),
                        facial_expression: fields.facial_expression,
                        body_language: fields.body_language,
                        posture: fields.posture,
                        raw_response: raw,
                        created_at: Utc::now(),
                    })
                }
                Err(e) => {
                    log::warn!(
                        "utterance {}: attempt {attempt}/{attempts} unparseable ({e}); raw={raw:?}",
                        utt.id
                    );
                    last_err = Some(BehaviorError::Unparseable {
                        attempts: attempt,
                        reason: e.to_string(),
                        raw,
                    });
                }
            },
            Err(e) => {
                log::warn!("utterance {}: attempt {attempt}/{attempts} failed: {e}", utt.id);
                last_err = Some(BehaviorError::Transport { attempts: attempt, last: e });
            }
        }
    }
    Err(last_err.expect("at least one attempt").into())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub total: usize,
    pub already_cached: usize,
    pub generated: usize,
    pub parse_failures: usize,
    pub transport_failures: usize,
}

impl GenerationSummary {
    pub fn annotated(&self) -> usize {
        self.already_cached + self.generated
    }

    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.annotated() as f64 / self.total as f64
        }
    }

    pub fn failure_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            (self.parse_failures + self.transport_failures) as f64 / self.total as f64
        }
    }
}

/// Annotates every utterance in `manifest` that has no cached record for the
/// client's model, with at most `max_concurrency` requests in flight.
/// Failures are written to the cache's failure log.
pub fn generate_all(
    client: &dyn MllmClient,
    manifest: &CorpusManifest,
    template: &StructuredTemplate,
    cache: &BehaviorCache,
    opts: &GenerationOptions,
    max_concurrency: usize,
) -> Result<GenerationSummary, crate::Error> {
    let model = client.model_name().to_string();
    let todo: Vec<_> = manifest
        .utterances()
        .filter(|r| cache.get_for(&r.utterance.id, &model).is_none())
        .collect();
    let summary = Mutex::new(GenerationSummary {
        total: manifest.n_utterances(),
        already_cached: manifest.n_utterances() - todo.len(),
        ..Default::default()
    });
    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<crate::Error>> = Mutex::new(None);

    thread::scope(|s| {
        for _ in 0..max_concurrency.max(1).min(todo.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(r) = todo.get(i) else { break };
                let outcome = generate_behavior(client, r.utterance, r.conversation, template, opts);
                let stored = match outcome {
                    Ok(ann) => {
                        summary.lock().unwrap().generated += 1;
                        cache.put(&ann).map(|_| ())
                    }
                    Err(crate::Error::Behavior(err)) => {
                        let mut sum = summary.lock().unwrap();
                        if matches!(err, BehaviorError::Transport { .. }) {
                            sum.transport_failures += 1;
                        } else {
                            sum.parse_failures += 1;
                        }
                        drop(sum);
                        cache.put_failure(&FailureRecord::from_error(&r.utterance.id, &model, &err))
                    }
                    Err(other) => Err(other),
                };
                if let Err(e) = stored {
                    first_error.lock().unwrap().get_or_insert(e);
                    break;
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(summary.into_inner().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmotionLabelSet, Split};
    use std::sync::atomic::AtomicU32;

    fn conv() -> Conversation {
        let u = |i: usize, text: &str| Utterance {
            id: format!("c_u{i}"),
            speaker: "A".into(),
            text: text.into(),
            audio_ref: Some(format!("a{i}.wav")),
            video_ref: Some(format!("v{i}")),
            label: None,
            index_in_conversation: i,
        };
        Conversation { id: "c".into(), utterances: vec![u(0, "Hi."), u(1, "Great news!")] }
    }

    fn fast() -> GenerationOptions {
        GenerationOptions { backoff_base: Duration::from_millis(1), ..Default::default() }
    }

    const GOOD: &str = "Facial expression: smiling broadly. Body language: leaning forward eagerly. Posture: upright and open.";

    #[test]
    fn mock_response_is_parsed_into_fields() {
        let c = conv();
        let client = MockMllmClient::fixed("qwen-mock", GOOD);
        let ann = generate_behavior(&client, &c.utterances[1], &c, &StructuredTemplate::behavior_default(), &fast()).unwrap();
        assert_eq!(ann.facial_expression, "smiling broadly.");
        assert_eq!(ann.body_language, "leaning forward eagerly.");
        assert_eq!(ann.posture, "upright and open.");
        assert_eq!(ann.source_model, "qwen-mock");
        assert_eq!(ann.raw_response, GOOD);
    }

    #[test]
    fn missing_posture_fails_after_retries() {
        let c = conv();
        let client = MockMllmClient::fixed("m", "Facial expression: calm. Body language: still.");
        let err = generate_behavior(&client, &c.utterances[0], &c, &StructuredTemplate::behavior_default(), &fast()).unwrap_err();
        match err {
            crate::Error::Behavior(BehaviorError::Unparseable { attempts, reason, raw }) => {
                assert_eq!(attempts, 4);
                assert!(reason.contains("posture"));
                assert!(raw.contains("still"));
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(client.calls(), 4);
    }

    #[test]
    fn echoed_prompt_is_not_a_behavior_answer() {
        let c = conv();
        let client = MockMllmClient::echo("echo");
        let err = generate_behavior(&client, &c.utterances[1], &c, &StructuredTemplate::behavior_default(), &fast()).unwrap_err();
        assert!(matches!(err, crate::Error::Behavior(BehaviorError::Unparseable { .. })), "{err}");
    }

    #[test]
    fn transport_errors_report_attempt_count() {
        let c = conv();
        let client = MockMllmClient::failing("down");
        let err = generate_behavior(&client, &c.utterances[1], &c, &StructuredTemplate::behavior_default(), &fast()).unwrap_err();
        assert!(matches!(err, crate::Error::Behavior(BehaviorError::Transport { attempts: 4, .. })));
    }

    #[test]
    fn recovers_when_a_retry_succeeds() {
        let c = conv();
        let n = AtomicU32::new(0);
        let client = MockMllmClient::from_fn("flaky", move |_| {
            if n.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(ClientError::Timeout)
            } else {
                Ok(GOOD.to_string())
            }
        });
        assert!(generate_behavior(&client, &c.utterances[1], &c, &StructuredTemplate::behavior_default(), &fast()).is_ok());
    }

    #[test]
    fn history_flag_controls_context() {
        let c = conv();
        let t = StructuredTemplate::behavior_default();
        let plain = build_request(&c.utterances[1], &c, &t, &fast()).unwrap();
        assert!(!plain.prompt_text.contains("Hi."));
        let with = build_request(&c.utterances[1], &c, &t, &GenerationOptions { include_history: true, ..fast() }).unwrap();
        assert!(with.prompt_text.contains("A: Hi.\nA: Great news!"));
        assert_eq!(with.media_refs.len(), 2);
    }

    #[test]
    fn generation_is_deterministic_with_mock() {
        let c = conv();
        let t = StructuredTemplate::behavior_default();
        let client = MockMllmClient::from_fn("det", |req| {
            Ok(format!("Facial expression: {}. Body language: b. Posture: p.", req.prompt_text.len()))
        });
        let a = generate_behavior(&client, &c.utterances[1], &c, &t, &fast()).unwrap();
        let b = generate_behavior(&client, &c.utterances[1], &c, &t, &fast()).unwrap();
        assert_eq!(
            (a.facial_expression, a.body_language, a.posture, a.raw_response),
            (b.facial_expression, b.body_language, b.posture, b.raw_response)
        );
    }

    #[test]
    fn generate_all_fills_cache_and_is_idempotent() {
        let convs: Vec<Conversation> = (0..5)
            .map(|k| {
                let mut c = conv();
                c.id = format!("c{k}");
                for u in &mut c.utterances {
                    u.id = format!("c{k}_{}", u.id);
                }
                c
            })
            .collect();
        let m = CorpusManifest::new(convs, Split::Train, EmotionLabelSet::iemocap()).unwrap();
        let cache = BehaviorCache::in_memory();
        let client = MockMllmClient::fixed("m", GOOD);
        let s = generate_all(&client, &m, &StructuredTemplate::behavior_default(), &cache, &fast(), 3).unwrap();
        assert_eq!((s.total, s.generated, s.coverage()), (10, 10, 1.0));
        let again = generate_all(&client, &m, &StructuredTemplate::behavior_default(), &cache, &fast(), 3).unwrap();
        assert_eq!((again.generated, again.already_cached), (0, 10));
        assert_eq!(client.calls(), 10);
    }

    #[test]
    fn generate_all_records_failures() {
        let m = CorpusManifest::new(vec![conv()], Split::Train, EmotionLabelSet::iemocap()).unwrap();
        let cache = BehaviorCache::in_memory();
        let client = MockMllmClient::fixed("m", "nothing useful");
        let s = generate_all(&client, &m, &StructuredTemplate::behavior_default(), &cache, &fast(), 2).unwrap();
        assert_eq!(s.parse_failures, 2);
        assert_eq!(s.failure_rate(), 1.0);
        let f = cache.failure_for("c_u0", "m").unwrap();
        assert_eq!(f.raw_response.as_deref(), Some("nothing useful"));
    }
}
