//! Structured prompt templates (title / context / objective / constraint) and
//! the builders for behavior generation, behavior alignment and emotion
//! recognition prompts.
//!
//! Rendered layout:
//!
//! ```text
//! <title>
//! <context header>
//! <speaker>: <text>          one line per history turn, target last
//! <behavior sentences>       emotion prompts only, when enabled
//! Video: <VID> <VID> ...
//! Audio: <AUD> ...
//! Objective: <objective>
//! Constraint: <constraint>
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::behavior::BehaviorAnnotation;
use crate::corpus::{EmotionLabelSet, Utterance};
use crate::error::{Error, Result};

pub const BEHAVIOR_TEMPLATE: &str = include_str!("../templates/behavior.tmpl");
pub const MERC_TEMPLATE: &str = include_str!("../templates/merc.tmpl");

const BEHAVIORS_SLOT: &str = "{behaviors}";
const LABELS_SLOT: &str = "{labels}";

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[A-Z]+>|[\p{L}\p{N}']+|[^\s\p{L}\p{N}]").unwrap())
}

/// Splits text into word, punctuation and `<TOKEN>` pieces. Placeholder
/// offsets and the stand-in model's tokenizer both index into this sequence.
pub fn pretokenize(text: &str) -> Vec<&str> {
    token_regex().find_iter(text).map(|m| m.as_str()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderSpec {
    pub video_token: String,
    pub audio_token: String,
    pub n_video_slots: usize,
    pub n_audio_slots: usize,
}

impl Default for PlaceholderSpec {
    fn default() -> Self {
        Self {
            video_token: "<VID>".into(),
            audio_token: "<AUD>".into(),
            n_video_slots: 64,
            n_audio_slots: 16,
        }
    }
}

/// Which behavior descriptions take part in a prompt or target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BehaviorFlags {
    pub facial: bool,
    pub body: bool,
    pub posture: bool,
}

impl BehaviorFlags {
    pub const ALL: Self = Self { facial: true, body: true, posture: true };
    pub const NONE: Self = Self { facial: false, body: false, posture: false };
    pub const FACIAL: Self = Self { facial: true, body: false, posture: false };
    pub const BODY: Self = Self { facial: false, body: true, posture: false };
    pub const POSTURE: Self = Self { facial: false, body: false, posture: true };

    pub fn any(&self) -> bool {
        self.facial || self.body || self.posture
    }

    /// Enabled behaviors as `(display name, description)` in facial, body, posture order.
    pub fn select<'a>(&self, ann: &'a BehaviorAnnotation) -> Vec<(&'static str, &'a str)> {
        let mut out = Vec::with_capacity(3);
        if self.facial {
            out.push(("facial expression", ann.facial_expression.as_str()));
        }
        if self.body {
            out.push(("body language", ann.body_language.as_str()));
        }
        if self.posture {
            out.push(("posture", ann.posture.as_str()));
        }
        out
    }

    fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.facial {
            out.push("facial expression");
        }
        if self.body {
            out.push("body language");
        }
        if self.posture {
            out.push("posture");
        }
        out
    }
}

impl Default for BehaviorFlags {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for BehaviorFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.facial {
            parts.push("facial");
        }
        if self.body {
            parts.push("body");
        }
        if self.posture {
            parts.push("posture");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl std::str::FromStr for BehaviorFlags {
    type Err = Error;

    /// Accepts a comma list of `facial`, `body`, `posture`, or `all` / `none`.
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "facial" | "f" => flags.facial = true,
                "body" | "b" => flags.body = true,
                "posture" | "p" => flags.posture = true,
                "all" => flags = Self::ALL,
                "none" => {}
                other => return Err(Error::Config(format!("unknown behavior type {other:?}"))),
            }
        }
        Ok(flags)
    }
}

/// A four-section prompt skeleton.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredTemplate {
    pub title: String,
    /// Header line that introduces the dialogue lines.
    pub context_header: String,
    pub objective: String,
    pub constraint: String,
    pub placeholders: PlaceholderSpec,
}

impl StructuredTemplate {
    pub fn behavior_default() -> Self {
        Self::parse(BEHAVIOR_TEMPLATE).expect("bundled behavior template")
    }

    pub fn merc_default() -> Self {
        Self::parse(MERC_TEMPLATE).expect("bundled emotion template")
    }

    /// Parses the `[section]` file format used by the bundled templates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut title = None;
        let mut context = None;
        let mut objective = None;
        let mut constraint = None;
        let mut placeholders = None;

        let mut current: Option<String> = None;
        let mut body: Vec<&str> = Vec::new();
        let mut flush = |name: Option<String>, body: &mut Vec<&str>| -> Result<()> {
            let Some(name) = name else {
                if body.iter().any(|l| !l.trim().is_empty()) {
                    return Err(Error::Validation("text before the first template section".into()));
                }
                return Ok(());
            };
            let joined = body.join("\n").trim().to_string();
            body.clear();
            let slot = match name.as_str() {
                "title" => &mut title,
                "context" => &mut context,
                "objective" => &mut objective,
                "constraint" => &mut constraint,
                "placeholders" => &mut placeholders,
                other => return Err(Error::Validation(format!("unknown template section [{other}]"))),
            };
            if slot.is_some() {
                return Err(Error::Validation(format!("duplicate template section [{name}]")));
            }
            *slot = Some(joined);
            Ok(())
        };

        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && !trimmed.contains(' ') {
                flush(current.take(), &mut body)?;
                current = Some(trimmed[1..trimmed.len() - 1].to_ascii_lowercase());
            } else {
                body.push(line);
            }
        }
        flush(current.take(), &mut body)?;

        let placeholders = match placeholders {
            Some(text) => parse_placeholder_section(&text)?,
            None => PlaceholderSpec::default(),
        };
        let template = Self {
            title: title.unwrap_or_default(),
            context_header: context.unwrap_or_default(),
            objective: objective.unwrap_or_default(),
            constraint: constraint.unwrap_or_default(),
            placeholders,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let template = Self::parse(&text)?;
        Ok((template, checksum(&text)))
    }

    pub fn render_file(&self) -> String {
        format!(
            "[title]\n{}\n\n[context]\n{}\n\n[objective]\n{}\n\n[constraint]\n{}\n\n[placeholders]\nvideo_token = {}\naudio_token = {}\nn_video_slots = {}\nn_audio_slots = {}\n",
            self.title,
            self.context_header,
            self.objective,
            self.constraint,
            self.placeholders.video_token,
            self.placeholders.audio_token,
            self.placeholders.n_video_slots,
            self.placeholders.n_audio_slots,
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("title", &self.title),
            ("context", &self.context_header),
            ("objective", &self.objective),
            ("constraint", &self.constraint),
        ] {
            if value.trim().is_empty() {
                return Err(Error::Validation(format!("template section {name} is empty")));
            }
        }
        let ph = &self.placeholders;
        for token in [&ph.video_token, &ph.audio_token] {
            if !is_placeholder_shaped(token) {
                return Err(Error::Validation(format!(
                    "placeholder token {token:?} must look like <UPPERCASE>"
                )));
            }
        }
        if ph.video_token == ph.audio_token {
            return Err(Error::Validation("video and audio placeholders must differ".into()));
        }
        Ok(())
    }

    /// Copy of the template with a different audio slot count, used when an
    /// utterance yields fewer audio windows than the template's cap.
    pub fn with_audio_slots(&self, n: usize) -> Self {
        let mut t = self.clone();
        t.placeholders.n_audio_slots = n;
        t
    }

    pub fn with_video_slots(&self, n: usize) -> Self {
        let mut t = self.clone();
        t.placeholders.n_video_slots = n;
        t
    }
}

fn is_placeholder_shaped(token: &str) -> bool {
    token.len() > 2
        && token.starts_with('<')
        && token.ends_with('>')
        && token[1..token.len() - 1].chars().all(|c| c.is_ascii_uppercase())
}

fn parse_placeholder_section(text: &str) -> Result<PlaceholderSpec> {
    let mut spec = PlaceholderSpec::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("bad placeholder line {line:?}")))?;
        let value = value.trim();
        let count = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad slot count {value:?}")))
        };
        match key.trim() {
            "video_token" => spec.video_token = value.to_string(),
            "audio_token" => spec.audio_token = value.to_string(),
            "n_video_slots" => spec.n_video_slots = count()?,
            "n_audio_slots" => spec.n_audio_slots = count()?,
            other => return Err(Error::Validation(format!("unknown placeholder key {other:?}"))),
        }
    }
    Ok(spec)
}

/// SHA-256 hex digest of template text.
pub fn checksum(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderPositions {
    pub video: Vec<usize>,
    pub audio: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderCounts {
    pub video: usize,
    pub audio: usize,
}

/// A fully rendered prompt plus its training target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub text: String,
    /// Dialogue lines (and behavior sentences) as rendered in the context section.
    pub context: String,
    /// Offsets into [`pretokenize`]`(text)`.
    pub placeholder_positions: PlaceholderPositions,
    pub placeholder_spec: PlaceholderSpec,
    pub target_text: Option<String>,
    pub target_label: Option<String>,
    pub behavior_flags: BehaviorFlags,
}

pub fn count_placeholders(p: &PromptInstance) -> PlaceholderCounts {
    let spec = &p.placeholder_spec;
    let mut counts = PlaceholderCounts { video: 0, audio: 0 };
    for tok in pretokenize(&p.text) {
        if tok == spec.video_token {
            counts.video += 1;
        } else if tok == spec.audio_token {
            counts.audio += 1;
        }
    }
    counts
}

fn check_collision(spec: &PlaceholderSpec, what: &str, text: &str) -> Result<()> {
    for token in [&spec.video_token, &spec.audio_token] {
        if text.contains(token.as_str()) {
            return Err(Error::Prompt(format!(
                "{what} contains reserved placeholder {token}"
            )));
        }
    }
    Ok(())
}

fn dialogue_lines(spec: &PlaceholderSpec, utt: &Utterance, history: &[Utterance]) -> Result<Vec<String>> {
    let mut lines = Vec::with_capacity(history.len() + 1);
    for u in history.iter().chain(std::iter::once(utt)) {
        check_collision(spec, &format!("utterance {}", u.id), &u.text)?;
        check_collision(spec, &format!("speaker of utterance {}", u.id), &u.speaker)?;
        lines.push(format!("{}: {}", u.speaker, u.text));
    }
    Ok(lines)
}

fn render(
    template: &StructuredTemplate,
    context_lines: &[String],
    objective: &str,
    constraint: &str,
) -> (String, String, PlaceholderPositions) {
    let spec = &template.placeholders;
    let context = context_lines.join("\n");
    let mut text = String::new();
    text.push_str(&template.title);
    text.push('\n');
    text.push_str(&template.context_header);
    text.push('\n');
    if !context.is_empty() {
        text.push_str(&context);
        text.push('\n');
    }
    if spec.n_video_slots > 0 {
        text.push_str("Video:");
        for _ in 0..spec.n_video_slots {
            text.push(' ');
            text.push_str(&spec.video_token);
        }
        text.push('\n');
    }
    if spec.n_audio_slots > 0 {
        text.push_str("Audio:");
        for _ in 0..spec.n_audio_slots {
            text.push(' ');
            text.push_str(&spec.audio_token);
        }
        text.push('\n');
    }
    text.push_str("Objective: ");
    text.push_str(objective);
    text.push('\n');
    text.push_str("Constraint: ");
    text.push_str(constraint);

    let mut positions = PlaceholderPositions::default();
    for (i, tok) in pretokenize(&text).into_iter().enumerate() {
        if tok == spec.video_token {
            positions.video.push(i);
        } else if tok == spec.audio_token {
            positions.audio.push(i);
        }
    }
    (text, context, positions)
}

fn behavior_names_phrase(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => (*one).to_string(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

/// The prompt sent to the heavyweight model to describe the target speaker's behavior.
pub fn build_behavior_prompt(
    template: &StructuredTemplate,
    utt: &Utterance,
    history: &[Utterance],
) -> Result<PromptInstance> {
    build_behavior_prompt_with(template, utt, history, BehaviorFlags::ALL)
}

fn build_behavior_prompt_with(
    template: &StructuredTemplate,
    utt: &Utterance,
    history: &[Utterance],
    flags: BehaviorFlags,
) -> Result<PromptInstance> {
    template.validate()?;
    let lines = dialogue_lines(&template.placeholders, utt, history)?;
    let objective = template
        .objective
        .replace(BEHAVIORS_SLOT, &behavior_names_phrase(&flags.names()));
    let (text, context, placeholder_positions) =
        render(template, &lines, &objective, &template.constraint);
    Ok(PromptInstance {
        text,
        context,
        placeholder_positions,
        placeholder_spec: template.placeholders.clone(),
        target_text: None,
        target_label: None,
        behavior_flags: flags,
    })
}

/// Stage-A training instance: text plus placeholders in, selected behavior
/// descriptions (facial, body, posture order) as the target.
pub fn build_alignment_prompt(
    template: &StructuredTemplate,
    utt: &Utterance,
    history: &[Utterance],
    annotation: &BehaviorAnnotation,
    flags: BehaviorFlags,
) -> Result<PromptInstance> {
    if !flags.any() {
        return Err(Error::Config("stage A needs at least one behavior type".into()));
    }
    if annotation.utterance_id != utt.id {
        return Err(Error::Prompt(format!(
            "annotation for {} used with utterance {}",
            annotation.utterance_id, utt.id
        )));
    }
    let mut prompt = build_behavior_prompt_with(template, utt, history, flags)?;
    let selected = flags.select(annotation);
    for (name, desc) in &selected {
        check_collision(&template.placeholders, &format!("{name} description"), desc)?;
    }
    let target = selected
        .iter()
        .map(|(_, d)| d.trim())
        .collect::<Vec<_>>()
        .join(" ");
    prompt.target_text = Some(target);
    Ok(prompt)
}

/// The emotion recognition prompt. Behavior sentences enabled by `flags` are
/// placed right after the target line; with no annotation nothing is added.
pub fn build_merc_prompt(
    template: &StructuredTemplate,
    utt: &Utterance,
    history: &[Utterance],
    label_set: &EmotionLabelSet,
    annotation: Option<&BehaviorAnnotation>,
    flags: BehaviorFlags,
) -> Result<PromptInstance> {
    template.validate()?;
    if label_set.is_empty() {
        return Err(Error::Validation("label set is empty".into()));
    }
    if !template.constraint.contains(LABELS_SLOT) {
        return Err(Error::Validation(format!(
            "emotion template constraint must contain the {LABELS_SLOT} slot"
        )));
    }
    if let Some(label) = &utt.label {
        if !label_set.contains(label) {
            return Err(Error::Validation(format!(
                "label {label:?} of utterance {} is not in the label set",
                utt.id
            )));
        }
    }
    let spec = &template.placeholders;
    let mut lines = dialogue_lines(spec, utt, history)?;
    let mut effective_flags = BehaviorFlags::NONE;
    if let Some(ann) = annotation {
        if ann.utterance_id != utt.id {
            return Err(Error::Prompt(format!(
                "annotation for {} used with utterance {}",
                ann.utterance_id, utt.id
            )));
        }
        effective_flags = flags;
        for (name, desc) in flags.select(ann) {
            check_collision(spec, &format!("{name} description"), desc)?;
            lines.push(format!("{} of {}: {}", capitalize(name), utt.speaker, desc.trim()));
        }
    }
    let constraint = template
        .constraint
        .replace(LABELS_SLOT, &label_set.labels().join(", "));
    let (text, context, placeholder_positions) =
        render(template, &lines, &template.objective, &constraint);
    Ok(PromptInstance {
        text,
        context,
        placeholder_positions,
        placeholder_spec: spec.clone(),
        target_text: utt.label.clone(),
        target_label: utt.label.clone(),
        behavior_flags: effective_flags,
    })
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn utt(id: &str, speaker: &str, text: &str, label: Option<&str>, i: usize) -> Utterance {
        Utterance {
            id: id.into(),
            speaker: speaker.into(),
            text: text.into(),
            audio_ref: None,
            video_ref: None,
            label: label.map(Into::into),
            index_in_conversation: i,
        }
    }

    fn ann(id: &str) -> BehaviorAnnotation {
        BehaviorAnnotation {
            utterance_id: id.into(),
            facial_expression: "smiling broadly.".into(),
            body_language: "leaning forward eagerly.".into(),
            posture: "upright and open.".into(),
            source_model: "mock".into(),
            raw_response: String::new(),
            created_at: chrono::Utc.timestamp_opt(0, 0).unwrap(),
        }
    }

    #[test]
    fn bundled_templates_parse_and_round_trip() {
        for t in [StructuredTemplate::behavior_default(), StructuredTemplate::merc_default()] {
            assert_eq!(t.placeholders.n_video_slots, 64);
            assert_eq!(StructuredTemplate::parse(&t.render_file()).unwrap(), t);
        }
    }

    #[test]
    fn empty_objective_is_invalid() {
        let mut t = StructuredTemplate::behavior_default();
        t.objective = "  ".into();
        assert!(matches!(t.validate(), Err(Error::Validation(_))));
        let text = "[title]\nx\n[context]\nC:\n[objective]\n\n[constraint]\ny\n";
        assert!(StructuredTemplate::parse(text).is_err());
    }

    #[test]
    fn single_utterance_context() {
        let t = StructuredTemplate::behavior_default();
        let p = build_behavior_prompt(&t, &utt("u", "A", "Hello", None, 0), &[]).unwrap();
        assert_eq!(p.context, "A: Hello");
        assert!(p.text.contains("facial expression, body language, and posture"));
    }

    #[test]
    fn history_is_chronological_with_target_last() {
        let t = StructuredTemplate::behavior_default();
        let h = vec![utt("u0", "A", "Hi there", None, 0), utt("u1", "B", "Oh, hi.", None, 1)];
        let p = build_behavior_prompt(&t, &utt("u2", "A", "How are you?", None, 2), &h).unwrap();
        assert_eq!(p.context, "A: Hi there\nB: Oh, hi.\nA: How are you?");
    }

    #[test]
    fn placeholder_collision_is_a_build_error() {
        let t = StructuredTemplate::behavior_default();
        let err = build_behavior_prompt(&t, &utt("u", "A", "look <VID>", None, 0), &[]).unwrap_err();
        assert!(matches!(err, Error::Prompt(_)));
    }

    #[test]
    fn alignment_targets_follow_flags() {
        let t = StructuredTemplate::behavior_default();
        let u = utt("u", "A", "Hello", None, 0);
        let a = ann("u");
        let p = build_alignment_prompt(&t, &u, &[], &a, BehaviorFlags::FACIAL).unwrap();
        assert_eq!(p.target_text.as_deref(), Some("smiling broadly."));
        let p = build_alignment_prompt(&t, &u, &[], &a, BehaviorFlags::ALL).unwrap();
        assert_eq!(
            p.target_text.as_deref(),
            Some("smiling broadly. leaning forward eagerly. upright and open.")
        );
        let err = build_alignment_prompt(&t, &u, &[], &a, BehaviorFlags::NONE).unwrap_err();
        assert!(err.to_string().contains("stage A needs at least one behavior type"));
    }

    #[test]
    fn merc_constraint_lists_iemocap_labels() {
        let t = StructuredTemplate::merc_default();
        let set = EmotionLabelSet::iemocap();
        let p = build_merc_prompt(&t, &utt("u", "A", "Hello", Some("sad"), 0), &[], &set, None, BehaviorFlags::ALL)
            .unwrap();
        assert!(p.text.contains("happy, sad, neutral, angry, excited, frustrated"));
        assert_eq!(p.target_label.as_deref(), Some("sad"));
        assert_eq!(p.behavior_flags, BehaviorFlags::NONE);
        assert!(!p.text.contains("Facial expression of"));
    }

    #[test]
    fn merc_prompt_rejects_label_outside_set() {
        let t = StructuredTemplate::merc_default();
        let err = build_merc_prompt(
            &t,
            &utt("u", "A", "Hello", Some("bored"), 0),
            &[],
            &EmotionLabelSet::iemocap(),
            None,
            BehaviorFlags::ALL,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn merc_behavior_sentences_follow_target() {
        let t = StructuredTemplate::merc_default();
        let u = utt("u", "A", "Hello", Some("happy"), 0);
        let a = ann("u");
        let p = build_merc_prompt(&t, &u, &[], &EmotionLabelSet::iemocap(), Some(&a), BehaviorFlags::ALL).unwrap();
        assert_eq!(
            p.context,
            "A: Hello\nFacial expression of A: smiling broadly.\nBody language of A: leaning forward eagerly.\nPosture of A: upright and open."
        );
        let none = build_merc_prompt(&t, &u, &[], &EmotionLabelSet::iemocap(), Some(&a), BehaviorFlags::NONE).unwrap();
        let base = build_merc_prompt(&t, &u, &[], &EmotionLabelSet::iemocap(), None, BehaviorFlags::ALL).unwrap();
        assert_eq!(none.text, base.text);
    }

    #[test]
    fn placeholder_counts_match_spec() {
        let t = StructuredTemplate::merc_default().with_audio_slots(4);
        let p = build_merc_prompt(&t, &utt("u", "A", "Hi", None, 0), &[], &EmotionLabelSet::iemocap(), None, BehaviorFlags::ALL)
            .unwrap();
        assert_eq!(count_placeholders(&p), PlaceholderCounts { video: 64, audio: 4 });
        assert_eq!(p.placeholder_positions.video.len(), 64);
        let toks = pretokenize(&p.text);
        assert!(p.placeholder_positions.audio.iter().all(|&i| toks[i] == "<AUD>"));

        let zero = t.with_audio_slots(0).with_video_slots(0);
        let p = build_behavior_prompt(&zero, &utt("u", "A", "Hi", None, 0), &[]).unwrap();
        assert_eq!(count_placeholders(&p), PlaceholderCounts { video: 0, audio: 0 });
        assert!(!p.text.contains("Video:"));
    }

    #[test]
    fn flags_parse() {
        assert_eq!("facial,body,posture".parse::<BehaviorFlags>().unwrap(), BehaviorFlags::ALL);
        assert_eq!("none".parse::<BehaviorFlags>().unwrap(), BehaviorFlags::NONE);
        assert_eq!("body".parse::<BehaviorFlags>().unwrap(), BehaviorFlags::BODY);
        assert!("gait".parse::<BehaviorFlags>().is_err());
        assert_eq!(BehaviorFlags::FACIAL.to_string(), "facial");
    }

    #[test]
    fn pretokenize_keeps_placeholders_whole() {
        assert_eq!(
            pretokenize("A: it's <VID> fine, ok."),
            vec!["A", ":", "it's", "<VID>", "fine", ",", "ok", "."]
        );
    }

    fn subsequence(small: &[&str], big: &[&str]) -> bool {
        let mut it = big.iter();
        small.iter().all(|s| it.any(|b| b == s))
    }

    fn flags_from(bits: u8) -> BehaviorFlags {
        BehaviorFlags { facial: bits & 1 != 0, body: bits & 2 != 0, posture: bits & 4 != 0 }
    }

    proptest! {
        #[test]
        fn prompts_are_deterministic_and_monotone(a in 0u8..8, b in 0u8..8, text in "[a-z ]{1,30}", nv in 0usize..8, na in 0usize..5) {
            let t = StructuredTemplate::merc_default().with_video_slots(nv).with_audio_slots(na);
            let set = EmotionLabelSet::iemocap();
            let u = utt("u", "A", &text, Some("happy"), 0);
            let an = ann("u");
            let small = flags_from(a & b);
            let big = flags_from(a | b);
            let p1 = build_merc_prompt(&t, &u, &[], &set, Some(&an), small).unwrap();
            let p1b = build_merc_prompt(&t, &u, &[], &set, Some(&an), small).unwrap();
            let p2 = build_merc_prompt(&t, &u, &[], &set, Some(&an), big).unwrap();
            prop_assert_eq!(&p1.text, &p1b.text);
            let s1: Vec<&str> = p1.context.lines().skip(1).collect();
            let s2: Vec<&str> = p2.context.lines().skip(1).collect();
            prop_assert!(subsequence(&s1, &s2));
            prop_assert_eq!(count_placeholders(&p2), PlaceholderCounts { video: nv, audio: na });
            if small.any() {
                let t1 = build_alignment_prompt(&StructuredTemplate::behavior_default(), &u, &[], &an, small).unwrap();
                let t2 = build_alignment_prompt(&StructuredTemplate::behavior_default(), &u, &[], &an, big).unwrap();
                let w1 = pretokenize(t1.target_text.as_deref().unwrap());
                let w2 = pretokenize(t2.target_text.as_deref().unwrap());
                prop_assert!(subsequence(&w1, &w2));
            }
        }
    }
}
