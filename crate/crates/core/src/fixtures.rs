//! A small synthetic corpus for end-to-end runs without real media.
//!
//! Dialogue text and media carry no label signal: every text pair occurs
//! equally often under each label, and all clips are identical gray frames
//! and tones. Only the scripted behavior descriptions depend on the label.

use std::collections::HashMap;

use crate::behavior::MockMllmClient;
use crate::corpus::{Conversation, CorpusManifest, EmotionLabelSet, Split, Utterance};
use crate::error::Result;

const CONTEXT_LINES: [&str; 4] = [
    "So what happened at the office today?",
    "Did you get the message I left you?",
    "I heard the results came in this morning.",
    "Are we still meeting later this week?",
];

const TARGET_LINES: [&str; 4] = [
    "Well, they finally told me the news.",
    "I read it twice before I understood it.",
    "It was not what I expected at all.",
    "I keep thinking about what they said.",
];

const CONTEXT_BEHAVIOR: &str =
    "Facial expression: attentive look with steady eye contact\nBody language: hands resting on the table\nPosture: seated upright";

/// Behavior responses for a label; labels without a script get a generic one.
fn behavior_for(label: &str, variant: usize) -> String {
    let (face, body, posture) = match (label, variant % 2) {
        ("happy", 0) => ("bright smile with raised cheeks", "open animated gestures", "leaning forward eagerly"),
        ("happy", _) => ("wide grin and sparkling eyes", "energetic hand movements", "upright and bouncy"),
        ("sad", 0) => ("downturned mouth and lowered gaze", "slow hesitant movements", "slumped shoulders"),
        ("sad", _) => ("teary eyes and trembling lips", "arms wrapped around the body", "hunched over"),
        ("angry", _) => ("furrowed brows and clenched jaw", "sharp pointing gestures", "rigid and tense"),
        ("neutral", _) => ("relaxed face with no clear emotion", "minimal gestures", "seated comfortably"),
        _ => ("distinct expression", "distinct gestures", "distinct stance"),
    };
    format!("Facial expression: {face}\nBody language: {body}\nPosture: {posture}")
}

pub struct ToyFixture {
    pub manifest: CorpusManifest,
    /// Video ref to scripted behavior response.
    pub behavior_script: HashMap<String, String>,
}

impl ToyFixture {
    pub fn client(&self) -> MockMllmClient {
        MockMllmClient::scripted("scripted-behavior", self.behavior_script.clone(), None)
    }
}

/// `n_conversations` two-turn dialogues; the second turn carries the label,
/// cycling through `labels`.
pub fn toy_fixture(n_conversations: usize, labels: EmotionLabelSet) -> Result<ToyFixture> {
    let k = labels.len();
    let mut conversations = Vec::with_capacity(n_conversations);
    let mut script = HashMap::new();
    for c in 0..n_conversations {
        let label = labels.labels()[c % k].clone();
        let pair = (c / k) % CONTEXT_LINES.len();
        let conv_id = format!("toy{c:03}");
        let mut utterances = Vec::new();
        for (j, text) in [CONTEXT_LINES[pair], TARGET_LINES[pair]].into_iter().enumerate() {
            let id = format!("{conv_id}_u{j}");
            let video = format!("synthetic:gray#{id}");
            let response = if j == 0 { CONTEXT_BEHAVIOR.to_string() } else { behavior_for(&label, c / k / CONTEXT_LINES.len()) };
            script.insert(video.clone(), response);
            utterances.push(Utterance {
                id: id.clone(),
                speaker: if j == 0 { "A".into() } else { "B".into() },
                text: text.into(),
                audio_ref: Some(format!("synthetic:tone-220-4#{id}")),
                video_ref: Some(video),
                label: (j == 1).then(|| label.clone()),
                index_in_conversation: j,
            });
        }
        conversations.push(Conversation { id: conv_id, utterances });
    }
    Ok(ToyFixture { manifest: CorpusManifest::new(conversations, Split::Train, labels)?, behavior_script: script })
}
