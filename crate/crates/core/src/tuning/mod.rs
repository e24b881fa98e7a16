//! Two-stage tuning of the stand-in decoder: behavior alignment followed by
//! emotion recognition over multimodal sequences.

mod decoder;
mod optim;
mod tokenizer;
mod train;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use decoder::{BaseWeights, DecoderConfig, ForwardCache, Lora, TinyDecoder, Trainable};
pub use optim::Adam;
pub use tokenizer::{Tokenizer, BOS, EOS, FIRST_HASHED, PAD, UNK};
pub use train::{
    build_alignment_examples, build_merc_examples, load_checkpoint, predict_examples, stage_a_train,
    stage_b_train, CheckpointMeta, LogRecord, MercExample, StageReport, TrainInputs,
};

use crate::corpus::EmotionLabelSet;
use crate::error::{Error, Result};
use crate::features::ModalityFeatures;
use crate::params::Params;
use crate::prompting::{count_placeholders, pretokenize, PromptInstance};

/// Smallest probability used inside the log of the cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    Fp64Test,
    MixedTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda_l2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Start stage B from fresh low-rank factors instead of the stage-A ones.
    pub reinit_lora: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 3,
            lambda_l2: 1e-4,
            batch_size: 8,
            seed: 0,
            precision: Precision::Fp64Test,
            reinit_lora: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return Err(Error::Config(format!("lambda_l2 must be >= 0, got {}", self.lambda_l2)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance_id: String,
    pub predicted_label: String,
    pub label_distribution: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn check_batch(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    for (i, (p, y)) in predictions.iter().zip(targets).enumerate() {
        if p.len() != y.len() {
            return Err(Error::Shape(format!("example {i}: {} probabilities for {} classes", p.len(), y.len())));
        }
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(0.0..=1.0 + 1e-9).contains(v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("example {i} is not a probability distribution")));
        }
    }
    Ok(())
}

fn clamped(p: f64, example: usize, class: usize) -> f64 {
    if p < PROB_EPS {
        log::warn!("example {example}: probability {p} of class {class} clamped to {PROB_EPS}");
        PROB_EPS
    } else {
        p
    }
}

/// `-sum_i sum_k y_ik ln yhat_ik + lambda * ||w||^2`.
pub fn compute_loss(predictions: &[Vec<f64>], targets: &[Vec<f64>], w: &[f64], lambda: f64) -> Result<f64> {
    check_batch(predictions, targets)?;
    let mut ce = 0.0;
    for (i, (p, y)) in predictions.iter().zip(targets).enumerate() {
        for (k, (&pk, &yk)) in p.iter().zip(y).enumerate() {
            if yk != 0.0 {
                ce -= yk * clamped(pk, i, k).ln();
            }
        }
    }
    Ok(ce + lambda * w.iter().map(|v| v * v).sum::<f64>())
}

/// Gradients of [`compute_loss`] with respect to the predictions and `w`.
pub fn compute_loss_grad(
    predictions: &[Vec<f64>],
    targets: &[Vec<f64>],
    w: &[f64],
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    check_batch(predictions, targets)?;
    let d_pred = predictions
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (p, y))| {
            p.iter()
                .zip(y)
                .enumerate()
                .map(|(k, (&pk, &yk))| if yk == 0.0 || pk < PROB_EPS { 0.0 } else { -yk / clamped(pk, i, k) })
                .collect()
        })
        .collect();
    Ok((d_pred, w.iter().map(|v| 2.0 * lambda * v).collect()))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against class `target`, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -p[target].max(PROB_EPS).ln();
    p[target] -= 1.0;
    (loss, p)
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// What the language model contributes to assembly and prediction.
pub trait LanguageModel {
    fn d_model(&self) -> usize;
    fn tokenize(&self, text: &str) -> Vec<u32>;
    /// Embedding rows, `[ids.len() x d_model]`.
    fn embed(&self, ids: &[u32]) -> Array2<f64>;
    /// Logits over `candidates` at the last position and the hidden state there.
    fn score_candidates(&self, sequence: &Array2<f64>, candidates: &[u32]) -> (Vec<f64>, Vec<f64>);
    /// The parameters tuning is allowed to change.
    fn trainable(&self) -> &dyn Params;
}

impl LanguageModel for TinyDecoder {
    fn d_model(&self) -> usize {
        self.config().d_model
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer().encode(text)
    }

    fn embed(&self, ids: &[u32]) -> Array2<f64> {
        self.embed_tokens(ids)
    }

    fn score_candidates(&self, sequence: &Array2<f64>, candidates: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let cache = self.forward(sequence, false);
        let last = sequence.nrows() - 1;
        let (logits, _) = self.logits(&cache, &[last]);
        let scores = candidates.iter().map(|&c| logits[[0, c as usize]]).collect();
        (scores, cache.hidden().row(last).to_vec())
    }

    fn trainable(&self) -> &dyn Params {
        &self.trainable
    }
}

/// One element of an assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqItem {
    Token(u32),
    Video(usize),
    Audio(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    pub embeddings: Array2<f64>,
    pub items: Vec<SeqItem>,
    /// Sequence rows that hold video and audio features.
    pub video_rows: Vec<usize>,
    pub audio_rows: Vec<usize>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Placeholder tokens still present; zero after assembly.
    pub fn remaining_placeholders(&self, placeholder_ids: &[u32]) -> usize {
        self.items
            .iter()
            .filter(|i| matches!(i, SeqItem::Token(t) if placeholder_ids.contains(t)))
            .count()
    }
}

/// Token ids and placeholder rows of a prompt, checked against feature row counts.
pub(crate) fn layout(
    p: &PromptInstance,
    lm: &dyn LanguageModel,
    video_rows: usize,
    audio_rows: usize,
) -> Result<(Vec<u32>, Vec<SeqItem>, Vec<usize>, Vec<usize>)> {
    let counts = count_placeholders(p);
    if counts.video != video_rows || counts.audio != audio_rows {
        return Err(Error::Assembly {
            expected: format!("{} video and {} audio feature rows", counts.video, counts.audio),
            actual: format!("{video_rows} video and {audio_rows} audio rows"),
        });
    }
    let spec = &p.placeholder_spec;
    let ids = lm.tokenize(&p.text);
    let words = pretokenize(&p.text);
    debug_assert_eq!(ids.len(), words.len());
    let (mut v, mut a) = (Vec::new(), Vec::new());
    let items = words
        .iter()
        .zip(&ids)
        .enumerate()
        .map(|(pos, (w, &id))| {
            if *w == spec.video_token {
                v.push(pos);
                SeqItem::Video(v.len() - 1)
            } else if *w == spec.audio_token {
                a.push(pos);
                SeqItem::Audio(a.len() - 1)
            } else {
                SeqItem::Token(id)
            }
        })
        .collect();
    Ok((ids, items, v, a))
}

/// Embeds the prompt text and substitutes each placeholder row with the
/// matching adapted feature row, in order.
pub fn assemble_multimodal_sequence(
    p: &PromptInstance,
    lm: &dyn LanguageModel,
    feats: &ModalityFeatures,
) -> Result<AssembledSequence> {
    let d = lm.d_model();
    for (name, m) in [("video", &feats.adapted_video), ("audio", &feats.adapted_audio)] {
        if m.nrows() > 0 && m.ncols() != d {
            return Err(Error::Shape(format!("adapted {name} width {} != d_model {d}", m.ncols())));
        }
    }
    let (ids, items, video_rows, audio_rows) =
        layout(p, lm, feats.adapted_video.nrows(), feats.adapted_audio.nrows())?;
    let mut embeddings = lm.embed(&ids);
    for (k, &row) in video_rows.iter().enumerate() {
        embeddings.row_mut(row).assign(&feats.adapted_video.row(k));
    }
    for (k, &row) in audio_rows.iter().enumerate() {
        embeddings.row_mut(row).assign(&feats.adapted_audio.row(k));
    }
    Ok(AssembledSequence { embeddings, items, video_rows, audio_rows })
}

/// Token id of every label; each label must be a single distinct token.
pub fn label_token_ids(lm: &dyn LanguageModel, labels: &EmotionLabelSet) -> Result<Vec<u32>> {
    let mut ids = Vec::with_capacity(labels.len());
    for l in labels.labels() {
        match lm.tokenize(l).as_slice() {
            [id] if !ids.contains(id) => ids.push(*id),
            _ => {
                return Err(Error::Config(format!(
                    "label {l:?} does not map to a single distinct token"
                )))
            }
        }
    }
    Ok(ids)
}

/// Constrained decoding: the answer is always a member of `labels`.
pub fn predict(
    lm: &dyn LanguageModel,
    utterance_id: &str,
    p: &PromptInstance,
    feats: &ModalityFeatures,
    labels: &EmotionLabelSet,
) -> Result<Prediction> {
    let seq = assemble_multimodal_sequence(p, lm, feats)?;
    if seq.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let candidates = label_token_ids(lm, labels)?;
    let (scores, embedding) = lm.score_candidates(&seq.embeddings, &candidates);
    Ok(prediction_from_scores(utterance_id, &scores, embedding, labels))
}

pub(crate) fn prediction_from_scores(
    utterance_id: &str,
    scores: &[f64],
    embedding: Vec<f64>,
    labels: &EmotionLabelSet,
) -> Prediction {
    let label_distribution = softmax(scores);
    let predicted_label = labels.labels()[argmax(&label_distribution)].clone();
    Prediction { utterance_id: utterance_id.to_string(), predicted_label, label_distribution, embedding }
}

/// Mean of the rows of `m` as a vector, used for pooled representations.
pub fn row_mean(m: &Array2<f64>) -> Vec<f64> {
    m.mean_axis(Axis(0)).map(|r| r.to_vec()).unwrap_or_default()
}
