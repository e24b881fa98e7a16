//! End-to-end runs: feature extraction, both tuning stages, and evaluation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::BehaviorCache;
use crate::corpus::{CorpusManifest, EmotionLabelSet, DEFAULT_MAX_TURNS};
use crate::error::{Error, Result};
use crate::eval::{per_class_metrics, MetricsReport};
use crate::features::{FeatureCache, FeatureExtractor, FeatureMap};
use crate::prompting::{BehaviorFlags, StructuredTemplate};
use crate::tuning::{
    build_merc_examples, predict_examples, stage_a_train, stage_b_train, DecoderConfig, MercExample, Prediction,
    StageReport, TinyDecoder, TrainInputs, TrainingConfig,
};

#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub labels: EmotionLabelSet,
    pub decoder: DecoderConfig,
    pub stage_a: TrainingConfig,
    pub stage_b: TrainingConfig,
    pub max_turns: usize,
    pub behavior_template: StructuredTemplate,
    pub merc_template: StructuredTemplate,
}

impl PipelineSettings {
    pub fn new(labels: EmotionLabelSet) -> Self {
        Self {
            labels,
            decoder: DecoderConfig::default(),
            stage_a: TrainingConfig::default(),
            stage_b: TrainingConfig::default(),
            max_turns: DEFAULT_MAX_TURNS,
            behavior_template: StructuredTemplate::behavior_default(),
            merc_template: StructuredTemplate::merc_default(),
        }
    }
}

/// Raw features for every utterance of `manifest`, read through `cache` when given.
pub fn extract_features(extractor: &FeatureExtractor, manifest: &CorpusManifest, cache: Option<&FeatureCache>) -> Result<FeatureMap> {
    let utts: Vec<_> = manifest.utterances().map(|r| r.utterance).collect();
    let rows = utts
        .par_iter()
        .map(|u| {
            let f = match cache {
                Some(c) => c.get_or_extract(extractor, u)?,
                None => extractor.extract(u)?,
            };
            Ok((u.id.clone(), f))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().collect())
}

/// Predictions and metrics of `model` on the labeled utterances of `manifest`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub examples: Vec<MercExample>,
    pub gold: Vec<String>,
    pub predictions: Vec<Prediction>,
    pub report: MetricsReport,
}

pub fn evaluate_model(
    model: &TinyDecoder,
    settings: &PipelineSettings,
    manifest: &CorpusManifest,
    features: &FeatureMap,
    behaviors: Option<&BehaviorCache>,
    flags: BehaviorFlags,
) -> Result<Evaluation> {
    let inputs = TrainInputs { manifest, features, template: &settings.merc_template, max_turns: settings.max_turns, run_dir: None };
    let examples = build_merc_examples(&inputs, &settings.labels, behaviors, flags, true)?;
    if examples.is_empty() {
        return Err(Error::Input(format!("split {} has no labeled utterances to evaluate", manifest.split)));
    }
    let predictions = predict_examples(model, &examples, &settings.labels)?;
    let gold: Vec<String> = examples.iter().map(|e| e.gold.clone().unwrap()).collect();
    let pred: Vec<String> = predictions.iter().map(|p| p.predicted_label.clone()).collect();
    let report = per_class_metrics(&gold, &pred, &settings.labels)?;
    Ok(Evaluation { examples, gold, predictions, report })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage_a: Option<StageReport>,
    pub stage_b: StageReport,
    pub report: MetricsReport,
}

pub struct RunResult {
    pub summary: RunSummary,
    pub evaluation: Evaluation,
    pub model: TinyDecoder,
}

/// Trains a fresh model and evaluates it on `eval`. Stage A runs only when
/// `flags` selects at least one behavior; with none this is the baseline.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    settings: &PipelineSettings,
    train: &CorpusManifest,
    eval: &CorpusManifest,
    features: &FeatureMap,
    behaviors: &BehaviorCache,
    flags: BehaviorFlags,
    run_dir: Option<&Path>,
) -> Result<RunResult> {
    let mut model = TinyDecoder::new(settings.decoder.clone())?;
    let stage_a = if flags.any() {
        let inputs = TrainInputs { manifest: train, features, template: &settings.behavior_template, max_turns: settings.max_turns, run_dir };
        Some(stage_a_train(&inputs, behaviors, flags, &mut model, &settings.stage_a)?)
    } else {
        None
    };
    let inputs = TrainInputs { manifest: train, features, template: &settings.merc_template, max_turns: settings.max_turns, run_dir };
    let stage_b = stage_b_train(&inputs, &settings.labels, Some(behaviors), flags, &mut model, &settings.stage_b)?;
    let evaluation = evaluate_model(&model, settings, eval, features, Some(behaviors), flags)?;
    let summary = RunSummary { stage_a, stage_b, report: evaluation.report.clone() };
    Ok(RunResult { summary, evaluation, model })
}
