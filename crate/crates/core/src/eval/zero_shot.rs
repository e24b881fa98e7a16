use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{metrics_from_indices, MetricsReport};
use crate::behavior::{BehaviorCache, GenerationOptions, MllmClient, MllmRequest};
use crate::corpus::{history_window, CorpusManifest, EmotionLabelSet};
use crate::error::{Error, Result};
use crate::prompting::{build_merc_prompt, BehaviorFlags, StructuredTemplate};

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Exact match on the trimmed answer, then case-insensitive whole-word
/// containment. Answers naming no label, or several, are invalid.
pub fn parse_label(response: &str, labels: &EmotionLabelSet) -> Option<usize> {
    let trimmed = response.trim().trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    if let Some(i) = labels.index_of(trimmed) {
        return Some(i);
    }
    let answer = words(response);
    let hits: Vec<usize> = labels
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            let lw = words(l);
            !lw.is_empty() && answer.windows(lw.len()).any(|w| w == lw.as_slice())
        })
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum ZeroShotOutcome {
    Label(String),
    Invalid(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    /// Over answered utterances; invalid answers count as errors.
    pub metrics: MetricsReport,
    pub invalid: usize,
    pub failed: usize,
    /// `(utterance_id, gold, outcome)` in corpus order.
    pub outcomes: Vec<(String, String, ZeroShotOutcome)>,
}

/// Queries `client` with the emotion prompt of every labeled utterance.
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_eval(
    client: &dyn MllmClient,
    manifest: &CorpusManifest,
    template: &StructuredTemplate,
    labels: &EmotionLabelSet,
    behaviors: Option<&BehaviorCache>,
    with_behavior: bool,
    opts: &GenerationOptions,
    max_concurrency: usize,
) -> Result<ZeroShotReport> {
    let flags = if with_behavior { BehaviorFlags::ALL } else { BehaviorFlags::NONE };
    let mut requests = Vec::new();
    for r in manifest.labeled() {
        let utt = r.utterance;
        let j = r.conversation.utterances.iter().position(|u| u.id == utt.id).unwrap();
        let history = history_window(r.conversation, j, opts.max_turns)?;
        let ann = if with_behavior { behaviors.and_then(|c| c.get(&utt.id)) } else { None };
        let prompt = build_merc_prompt(template, utt, history, labels, ann.as_ref(), flags)?;
        let mut req = MllmRequest::new(prompt.text)?;
        req.media_refs = MllmRequest::media_of(utt);
        req.generation_params = opts.params;
        requests.push((utt.id.clone(), utt.label.clone().unwrap(), req));
    }
    if requests.is_empty() {
        return Err(Error::Input("no labeled utterances to evaluate".into()));
    }
    let results: Vec<Mutex<Option<ZeroShotOutcome>>> = requests.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|s| {
        for _ in 0..max_concurrency.max(1).min(requests.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, _, req)) = requests.get(i) else { break };
                let mut outcome = None;
                for attempt in 0..=opts.max_retries {
                    if attempt > 0 {
                        thread::sleep(opts.backoff_base * 2u32.pow(attempt - 1));
                    }
                    match client.complete(req) {
                        Ok(text) => {
                            outcome = Some(match parse_label(&text, labels) {
                                Some(k) => ZeroShotOutcome::Label(labels.labels()[k].clone()),
                                None => ZeroShotOutcome::Invalid(text),
                            });
                            break;
                        }
                        Err(e) => outcome = Some(ZeroShotOutcome::Failed(e.to_string())),
                    }
                }
                *results[i].lock().unwrap() = outcome;
            });
        }
    });
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut outcomes = Vec::new();
    let (mut invalid, mut failed) = (0, 0);
    for ((id, g, _), slot) in requests.into_iter().zip(results) {
        let outcome = slot.into_inner().unwrap().expect("every request ran");
        match &outcome {
            ZeroShotOutcome::Label(l) => {
                gold.push(labels.index_of(&g).unwrap());
                pred.push(labels.index_of(l));
            }
            ZeroShotOutcome::Invalid(_) => {
                invalid += 1;
                gold.push(labels.index_of(&g).unwrap());
                pred.push(None);
            }
            ZeroShotOutcome::Failed(e) => {
                failed += 1;
                log::warn!("zero-shot request for {id} failed: {e}");
            }
        }
        outcomes.push((id, g, outcome));
    }
    if gold.is_empty() {
        return Err(Error::Input(format!("all {failed} zero-shot requests failed")));
    }
    let metrics = metrics_from_indices(&gold, &pred, labels)?
        .with_config_id(if with_behavior { "zero-shot+behavior" } else { "zero-shot" });
    Ok(ZeroShotReport { metrics, invalid, failed, outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::MockMllmClient;
    use crate::corpus::{Conversation, Split, Utterance};
    use std::time::Duration;

    fn manifest() -> CorpusManifest {
        let u = |i: usize, label: &str| Utterance {
            id: format!("u{i}"),
            speaker: "A".into(),
            text: format!("line {i}"),
            audio_ref: None,
            video_ref: Some(format!("v{i}")),
            label: Some(label.into()),
            index_in_conversation: i,
        };
        CorpusManifest::new(
            vec![Conversation { id: "c".into(), utterances: vec![u(0, "sad"), u(1, "happy"), u(2, "sad")] }],
            Split::Test,
            EmotionLabelSet::iemocap(),
        )
        .unwrap()
    }

    fn opts() -> GenerationOptions {
        GenerationOptions { backoff_base: Duration::ZERO, ..Default::default() }
    }

    #[test]
    fn parsing_rules() {
        let l = EmotionLabelSet::iemocap();
        assert_eq!(parse_label("sad", &l), l.index_of("sad"));
        assert_eq!(parse_label("I think the emotion is Sad.", &l), l.index_of("sad"));
        assert_eq!(parse_label("xyzzy", &l), None);
        assert_eq!(parse_label("happy or sad", &l), None);
        assert_eq!(parse_label("saddened", &l), None);
    }

    #[test]
    fn oracle_client_scores_perfectly() {
        let m = manifest();
        let table = [("v0", "sad"), ("v1", "happy"), ("v2", "sad")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let client = MockMllmClient::scripted("oracle", table, None);
        let r = zero_shot_eval(&client, &m, &StructuredTemplate::merc_default(), &EmotionLabelSet::iemocap(), None, false, &opts(), 2).unwrap();
        assert_eq!(r.metrics.overall_accuracy, 1.0);
        assert_eq!(r.metrics.weighted_f1, 1.0);
        assert_eq!(r.invalid, 0);
    }

    #[test]
    fn gibberish_is_invalid_and_failures_are_recorded() {
        let m = manifest();
        let client = MockMllmClient::fixed("g", "blorp");
        let r = zero_shot_eval(&client, &m, &StructuredTemplate::merc_default(), &EmotionLabelSet::iemocap(), None, false, &opts(), 2).unwrap();
        assert_eq!(r.invalid, 3);
        assert_eq!(r.metrics.overall_accuracy, 0.0);
        assert_eq!(r.metrics.n_examples, 3);

        let table = [("v0", "sad")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let partial = MockMllmClient::scripted("p", table, None);
        let r = zero_shot_eval(&partial, &m, &StructuredTemplate::merc_default(), &EmotionLabelSet::iemocap(), None, false, &opts(), 1).unwrap();
        assert_eq!(r.failed, 2);
        assert_eq!(r.metrics.n_examples, 1);
        assert_eq!(partial.calls(), 1 + 2 * 4);
    }
}
