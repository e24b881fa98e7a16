//! Conversation corpora: label sets, utterances, and JSONL manifests.
//!
//! A manifest holds one conversation per line:
//!
//! ```text
//! {"id":"c0","utterances":[{"id":"c0_u0","speaker":"A","text":"Hi","audio_ref":null,"video_ref":null,"label":"neutral","index":0}]}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on the number of preceding turns placed in a prompt.
pub const DEFAULT_MAX_TURNS: usize = 10;

/// Ordered set of emotion labels. A label's index is its position in the list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EmotionLabelSet {
    labels: Vec<String>,
}

impl EmotionLabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::Validation(format!(
                "label set needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(Error::Validation("label set contains an empty label".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::Validation(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// The six IEMOCAP classes in their conventional reporting order.
    pub fn iemocap() -> Self {
        Self::new(["happy", "sad", "neutral", "angry", "excited", "frustrated"])
            .expect("static label set")
    }

    /// The seven MELD classes in their conventional reporting order.
    pub fn meld() -> Self {
        Self::new(["neutral", "surprise", "fear", "sad", "joy", "disgust", "anger"])
            .expect("static label set")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "iemocap" => Some(Self::iemocap()),
            "meld" => Some(Self::meld()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }
}

impl TryFrom<Vec<String>> for EmotionLabelSet {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<EmotionLabelSet> for Vec<String> {
    fn from(set: EmotionLabelSet) -> Self {
        set.labels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub text: String,
    pub audio_ref: Option<String>,
    pub video_ref: Option<String>,
    pub label: Option<String>,
    #[serde(rename = "index")]
    pub index_in_conversation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Validation(format!(
                "conversation {} has no utterances",
                self.id
            )));
        }
        for (expected, utt) in self.utterances.iter().enumerate() {
            if utt.index_in_conversation != expected {
                return Err(Error::Validation(format!(
                    "utterance {} in conversation {} has index {}, expected {}",
                    utt.id, self.id, utt.index_in_conversation, expected
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

/// A validated split of a conversation corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub conversations: Vec<Conversation>,
    pub split: Split,
    pub label_set: EmotionLabelSet,
}

/// Handle to one utterance inside a manifest.
#[derive(Debug, Clone, Copy)]
pub struct UtteranceRef<'a> {
    pub conversation: &'a Conversation,
    pub utterance: &'a Utterance,
}

impl CorpusManifest {
    pub fn new(
        conversations: Vec<Conversation>,
        split: Split,
        label_set: EmotionLabelSet,
    ) -> Result<Self> {
        let manifest = Self {
            conversations,
            split,
            label_set,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conversations.is_empty() {
            return Err(Error::Validation("manifest contains no conversations".into()));
        }
        let mut ids = HashSet::new();
        for conv in &self.conversations {
            conv.validate()?;
            for utt in &conv.utterances {
                if !ids.insert(utt.id.as_str()) {
                    return Err(Error::Validation(format!("duplicate utterance id {}", utt.id)));
                }
                self.check_label(utt)?;
            }
        }
        Ok(())
    }

    fn check_label(&self, utt: &Utterance) -> Result<()> {
        match &utt.label {
            Some(label) if !self.label_set.contains(label) => Err(Error::Validation(format!(
                "unknown label {label:?} on utterance {}",
                utt.id
            ))),
            _ => Ok(()),
        }
    }

    /// Total number of utterances across all conversations.
    pub fn n_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn utterances(&self) -> impl Iterator<Item = UtteranceRef<'_>> {
        self.conversations.iter().flat_map(|conversation| {
            conversation
                .utterances
                .iter()
                .map(move |utterance| UtteranceRef {
                    conversation,
                    utterance,
                })
        })
    }

    /// Utterances that carry a gold label, in corpus order.
    pub fn labeled(&self) -> impl Iterator<Item = UtteranceRef<'_>> {
        self.utterances().filter(|r| r.utterance.label.is_some())
    }

    pub fn find(&self, utterance_id: &str) -> Option<UtteranceRef<'_>> {
        self.utterances().find(|r| r.utterance.id == utterance_id)
    }

    /// Serializes the manifest back to its JSONL form.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for conv in &self.conversations {
            out.push_str(&serde_json::to_string(conv)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::storage(path, e))
    }
}

/// Parses JSONL text into a validated manifest. `origin` only labels errors.
pub fn parse_manifest(
    text: &str,
    origin: &Path,
    split: Split,
    label_set: EmotionLabelSet,
) -> Result<CorpusManifest> {
    let mut conversations = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        conversations.push(conv);
    }
    CorpusManifest::new(conversations, split, label_set)
}

pub fn load_manifest(
    path: impl AsRef<Path>,
    split: Split,
    label_set: EmotionLabelSet,
) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    parse_manifest(&text, path, split, label_set)
}

/// The last `min(j, max_turns)` utterances strictly before index `j`.
pub fn history_window(conv: &Conversation, j: usize, max_turns: usize) -> Result<&[Utterance]> {
    if j >= conv.utterances.len() {
        return Err(Error::Index {
            index: j,
            len: conv.utterances.len(),
        });
    }
    let start = j - j.min(max_turns);
    Ok(&conv.utterances[start..j])
}
