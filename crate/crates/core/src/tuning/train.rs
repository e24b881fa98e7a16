use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decoder::{DecoderConfig, TinyDecoder, Trainable};
use super::optim::Adam;
use super::tokenizer::EOS;
use super::{layout, predict, softmax_cross_entropy, label_token_ids, Precision, Prediction, TrainingConfig};
use crate::behavior::BehaviorCache;
use crate::corpus::{history_window, CorpusManifest, EmotionLabelSet, UtteranceRef};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, ModalityFeatures, RawFeatures};
use crate::params::Params;
use crate::prompting::{build_alignment_prompt, build_merc_prompt, BehaviorFlags, PromptInstance, StructuredTemplate};

/// Everything a stage reads besides the model.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub manifest: &'a CorpusManifest,
    pub features: &'a FeatureMap,
    pub template: &'a StructuredTemplate,
    pub max_turns: usize,
    /// Run directory receiving checkpoints and logs; `None` keeps everything in memory.
    pub run_dir: Option<&'a Path>,
}

/// A rendered prompt with the raw features it was sized for.
#[derive(Debug, Clone)]
pub struct MercExample {
    pub utterance_id: String,
    pub gold: Option<String>,
    pub prompt: PromptInstance,
    pub raw: RawFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub n_examples: usize,
    pub steps: usize,
    pub log: Vec<LogRecord>,
    /// Mean data loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean data loss over the training set after the last update.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Training-set accuracy after each epoch (stage B only).
    pub epoch_accuracy: Vec<f64>,
    pub final_accuracy: Option<f64>,
    pub excluded: Vec<(String, String)>,
    pub checkpoints: Vec<PathBuf>,
    pub base_hash_before: String,
    pub base_hash_after: String,
    pub optimizer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: usize,
    pub decoder: DecoderConfig,
    pub training: TrainingConfig,
    pub base_hash: String,
    pub trainable_hash: String,
    pub n_trainable: usize,
}

fn position_in(r: &UtteranceRef) -> usize {
    r.conversation
        .utterances
        .iter()
        .position(|u| u.id == r.utterance.id)
        .expect("utterance belongs to its conversation")
}

fn features_of<'a>(features: &'a FeatureMap, id: &str) -> Result<&'a RawFeatures> {
    features
        .get(id)
        .ok_or_else(|| Error::Input(format!("no extracted features for utterance {id}")))
}

/// The template with one placeholder per feature row.
fn fit_template(template: &StructuredTemplate, raw: &RawFeatures) -> StructuredTemplate {
    template.with_video_slots(raw.video.nrows()).with_audio_slots(raw.audio.nrows())
}

/// Stage-A examples for every annotated utterance. Utterances without an
/// annotation are returned with the reason they were left out.
pub fn build_alignment_examples(
    inputs: &TrainInputs,
    cache: &BehaviorCache,
    flags: BehaviorFlags,
) -> Result<(Vec<MercExample>, Vec<(String, String)>)> {
    let mut examples = Vec::new();
    let mut excluded = Vec::new();
    for r in inputs.manifest.utterances() {
        let utt = r.utterance;
        let Some(ann) = cache.get(&utt.id) else {
            let reason = if cache.has_failure(&utt.id) { "behavior generation failed" } else { "no behavior annotation" };
            log::warn!("stage A: skipping {}: {reason}", utt.id);
            excluded.push((utt.id.clone(), reason.to_string()));
            continue;
        };
        let raw = features_of(inputs.features, &utt.id)?;
        let history = history_window(r.conversation, position_in(&r), inputs.max_turns)?;
        let prompt = build_alignment_prompt(&fit_template(inputs.template, raw), utt, history, &ann, flags)?;
        examples.push(MercExample { utterance_id: utt.id.clone(), gold: utt.label.clone(), prompt, raw: raw.clone() });
    }
    Ok((examples, excluded))
}

/// Emotion prompts for the labeled utterances (or all, if `labeled_only` is false).
pub fn build_merc_examples(
    inputs: &TrainInputs,
    labels: &EmotionLabelSet,
    behaviors: Option<&BehaviorCache>,
    flags: BehaviorFlags,
    labeled_only: bool,
) -> Result<Vec<MercExample>> {
    let mut out = Vec::new();
    for r in inputs.manifest.utterances() {
        let utt = r.utterance;
        if labeled_only && utt.label.is_none() {
            continue;
        }
        let raw = features_of(inputs.features, &utt.id)?;
        let history = history_window(r.conversation, position_in(&r), inputs.max_turns)?;
        let ann = if flags.any() { behaviors.and_then(|c| c.get(&utt.id)) } else { None };
        if flags.any() && ann.is_none() {
            log::warn!("no behavior annotation for {}; prompt carries text only", utt.id);
        }
        let prompt = build_merc_prompt(&fit_template(inputs.template, raw), utt, history, labels, ann.as_ref(), flags)?;
        out.push(MercExample { utterance_id: utt.id.clone(), gold: utt.label.clone(), prompt, raw: raw.clone() });
    }
    Ok(out)
}

enum Target {
    Tokens(Vec<u32>),
    Label(usize),
}

struct Compiled {
    ids: Vec<u32>,
    video_rows: Vec<usize>,
    audio_rows: Vec<usize>,
    video: Array2<f64>,
    audio: Array2<f64>,
    target: Target,
}

fn compile(model: &TinyDecoder, ex: &MercExample, target: Target) -> Result<Compiled> {
    let (ids, _, video_rows, audio_rows) = layout(&ex.prompt, model, ex.raw.video.nrows(), ex.raw.audio.nrows())?;
    if ids.is_empty() {
        return Err(Error::Input(format!("empty prompt for {}", ex.utterance_id)));
    }
    Ok(Compiled { ids, video_rows, audio_rows, video: ex.raw.video.clone(), audio: ex.raw.audio.clone(), target })
}

/// Loss and parameter gradient of one example; `correct` for label targets.
fn example_grad(model: &TinyDecoder, c: &Compiled, candidates: &[u32], need_grad: bool) -> (f64, Option<Trainable>, Option<bool>) {
    let t = &model.trainable;
    let (vout, vcache) = t.video.forward_cached(&c.video).expect("video width checked");
    let (aout, acache) = t.audio.forward_cached(&c.audio).expect("audio width checked");
    let mut ids = c.ids.clone();
    let prompt_len = ids.len();
    let (positions, targets): (Vec<usize>, Vec<usize>) = match &c.target {
        Target::Tokens(tokens) => {
            ids.extend_from_slice(tokens);
            let labels = tokens.iter().copied().chain(std::iter::once(EOS));
            (prompt_len - 1..prompt_len + tokens.len()).zip(labels.map(|l| l as usize)).unzip()
        }
        Target::Label(k) => (vec![prompt_len - 1], vec![*k]),
    };
    let mut x = model.embed_tokens(&ids);
    for (k, &row) in c.video_rows.iter().enumerate() {
        x.row_mut(row).assign(&vout.row(k));
    }
    for (k, &row) in c.audio_rows.iter().enumerate() {
        x.row_mut(row).assign(&aout.row(k));
    }
    let cache = model.forward(&x, need_grad);
    let (logits, ha) = model.logits(&cache, &positions);
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut correct = None;
    match &c.target {
        Target::Tokens(_) => {
            let n = positions.len() as f64;
            for (i, &tgt) in targets.iter().enumerate() {
                let (l, g) = softmax_cross_entropy(logits.row(i).as_slice().unwrap(), tgt);
                loss += l / n;
                for (j, gv) in g.into_iter().enumerate() {
                    dlogits[[i, j]] = gv / n;
                }
            }
        }
        Target::Label(k) => {
            let scores: Vec<f64> = candidates.iter().map(|&id| logits[[0, id as usize]]).collect();
            let (l, g) = softmax_cross_entropy(&scores, *k);
            loss = l;
            correct = Some(super::argmax(&scores) == *k);
            for (&id, gv) in candidates.iter().zip(g) {
                dlogits[[0, id as usize]] = gv;
            }
        }
    }
    if !need_grad {
        return (loss, None, correct);
    }
    let mut grads = t.zeros_like();
    let dx = model.backward(&cache, &positions, &ha, &dlogits, &mut grads);
    let dv = dx.select(ndarray::Axis(0), &c.video_rows);
    let da = dx.select(ndarray::Axis(0), &c.audio_rows);
    t.video.backward(&vcache, &dv, &mut grads.video);
    t.audio.backward(&acache, &da, &mut grads.audio);
    (loss, Some(grads), correct)
}

fn evaluate_set(model: &TinyDecoder, set: &[Compiled], candidates: &[u32]) -> (f64, Option<f64>) {
    if set.is_empty() {
        return (0.0, None);
    }
    let results: Vec<(f64, Option<bool>)> = set
        .par_iter()
        .map(|c| {
            let (l, _, ok) = example_grad(model, c, candidates, false);
            (l, ok)
        })
        .collect();
    let loss = results.iter().map(|r| r.0).sum::<f64>() / set.len() as f64;
    let oks: Vec<bool> = results.iter().filter_map(|r| r.1).collect();
    let acc = (!oks.is_empty()).then(|| oks.iter().filter(|&&b| b).count() as f64 / oks.len() as f64);
    (loss, acc)
}

fn params_blob(t: &Trainable) -> Vec<u8> {
    let flat = t.to_flat();
    let mut out = b"MCK1".to_vec();
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_checkpoint(dir: &Path, model: &TinyDecoder, meta: &CheckpointMeta, metrics: &serde_json::Value) -> Result<()> {
    let parent = dir.parent().expect("checkpoint dir has a parent");
    fs::create_dir_all(parent).map_err(|e| Error::storage(parent, e))?;
    let tmp = parent.join(format!(".{}.tmp", dir.file_name().unwrap().to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::storage(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::storage(&tmp, e))?;
    let files = [
        ("params.bin", params_blob(&model.trainable)),
        ("config.json", serde_json::to_vec_pretty(meta)?),
        ("metrics.json", serde_json::to_vec_pretty(metrics)?),
    ];
    for (name, bytes) in files {
        let p = tmp.join(name);
        fs::write(&p, bytes).map_err(|e| Error::storage(&p, e))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::storage(dir, e))
}

/// Rebuilds the model stored in a checkpoint directory.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TinyDecoder, CheckpointMeta)> {
    let dir = dir.as_ref();
    let cfg_path = dir.join("config.json");
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&cfg_path).map_err(|e| Error::storage(&cfg_path, e))?)?;
    let mut model = TinyDecoder::new(meta.decoder.clone())?;
    if model.base_hash() != meta.base_hash {
        return Err(Error::Validation(format!("{}: base weights do not match the recorded hash", dir.display())));
    }
    let blob_path = dir.join("params.bin");
    let bytes = fs::read(&blob_path).map_err(|e| Error::storage(&blob_path, e))?;
    let n = model.trainable.n_params();
    if bytes.len() != 12 + 8 * n || &bytes[..4] != b"MCK1" || u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize != n {
        return Err(Error::Validation(format!("{} does not match the model layout", blob_path.display())));
    }
    let flat: Vec<f64> = bytes[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    model.trainable.set_flat(&flat);
    Ok((model, meta))
}

struct StageRun<'a> {
    name: &'static str,
    cfg: &'a TrainingConfig,
    run_dir: Option<&'a Path>,
}

fn run_stage(
    stage: StageRun,
    model: &mut TinyDecoder,
    set: Vec<Compiled>,
    candidates: &[u32],
    excluded: Vec<(String, String)>,
) -> Result<StageReport> {
    let cfg = stage.cfg;
    let base_hash_before = model.base_hash();
    let stage_dir = stage.run_dir.map(|d| d.join(format!("stage_{}", stage.name)));
    let mut log_file = match &stage_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::storage(d, e))?;
            let p = d.join("run_log.jsonl");
            Some(File::create(&p).map_err(|e| Error::storage(&p, e))?)
        }
        None => None,
    };
    model.mixed_precision = cfg.precision == Precision::MixedTrain;
    let (initial_loss, _) = evaluate_set(model, &set, candidates);
    let mut opt = Adam::new(cfg.learning_rate, model.trainable.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut report = StageReport {
        stage: stage.name.to_string(),
        n_examples: set.len(),
        steps: 0,
        log: Vec::new(),
        initial_loss,
        final_loss: initial_loss,
        epoch_losses: Vec::new(),
        epoch_accuracy: Vec::new(),
        final_accuracy: None,
        excluded,
        checkpoints: Vec::new(),
        base_hash_before,
        base_hash_after: String::new(),
        optimizer: format!("adam(lr={}, beta1={}, beta2={}, eps={})", opt.lr, opt.beta1, opt.beta2, opt.eps),
    };
    let save = |model: &TinyDecoder, epoch: usize, metrics: serde_json::Value, report: &mut StageReport| -> Result<()> {
        if let Some(d) = &stage_dir {
            let dir = d.join(format!("epoch_{epoch}"));
            let meta = CheckpointMeta {
                stage: stage.name.to_string(),
                epoch,
                decoder: model.config().clone(),
                training: cfg.clone(),
                base_hash: model.base_hash(),
                trainable_hash: model.trainable.bitwise_hash(),
                n_trainable: model.trainable.n_params(),
            };
            write_checkpoint(&dir, model, &meta, &metrics)?;
            report.checkpoints.push(dir);
        }
        Ok(())
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Option<Trainable>, Option<bool>)> = batch
                .par_iter()
                .map(|&i| example_grad(model, &set[i], candidates, true))
                .collect();
            let b = batch.len() as f64;
            let mut grad = model.trainable.zeros_like();
            let mut data_loss = 0.0;
            for (l, g, _) in &results {
                data_loss += l / b;
                grad.add_scaled(g.as_ref().unwrap(), 1.0 / b);
            }
            let w = model.trainable.to_flat();
            let reg = cfg.lambda_l2 * w.iter().map(|v| v * v).sum::<f64>();
            let mut flat = grad.to_flat();
            for (g, v) in flat.iter_mut().zip(&w) {
                *g += 2.0 * cfg.lambda_l2 * v;
            }
            opt.step(&mut model.trainable, &flat);
            report.steps += 1;
            let rec = LogRecord { step: report.steps, loss: data_loss + reg, lr: cfg.learning_rate, split: "train".into() };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            report.log.push(rec);
            epoch_loss += data_loss;
            n_batches += 1;
        }
        let mean = epoch_loss / n_batches.max(1) as f64;
        report.epoch_losses.push(mean);
        let (_, acc) = if candidates.is_empty() { (0.0, None) } else { evaluate_set(model, &set, candidates) };
        if let Some(a) = acc {
            report.epoch_accuracy.push(a);
        }
        log::info!("stage {} epoch {epoch}: loss {mean:.5}{}", stage.name, acc.map(|a| format!(", train acc {a:.3}")).unwrap_or_default());
        save(model, epoch, serde_json::json!({"epoch": epoch, "mean_loss": mean, "train_accuracy": acc, "steps": report.steps}), &mut report)?;
    }
    if cfg.epochs == 0 {
        save(model, 0, serde_json::json!({"epoch": 0, "steps": 0}), &mut report)?;
    }
    let (final_loss, final_acc) = evaluate_set(model, &set, candidates);
    report.final_loss = final_loss;
    report.final_accuracy = final_acc;
    model.mixed_precision = false;
    report.base_hash_after = model.base_hash();
    if let Some(d) = &stage_dir {
        let p = d.join("report.json");
        fs::write(&p, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::storage(&p, e))?;
    }
    Ok(report)
}

/// Behavior alignment: next-token loss on the selected behavior descriptions.
pub fn stage_a_train(
    inputs: &TrainInputs,
    cache: &BehaviorCache,
    flags: BehaviorFlags,
    model: &mut TinyDecoder,
    cfg: &TrainingConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    let (examples, excluded) = build_alignment_examples(inputs, cache, flags)?;
    if examples.is_empty() {
        return Err(Error::Config(format!(
            "stage A has no training examples: {} of {} utterances lack behavior annotations",
            excluded.len(),
            inputs.manifest.n_utterances()
        )));
    }
    let tok = model.tokenizer().clone();
    let set = examples
        .iter()
        .map(|ex| {
            let target = tok.encode(ex.prompt.target_text.as_deref().unwrap_or_default());
            compile(model, ex, Target::Tokens(target))
        })
        .collect::<Result<Vec<_>>>()?;
    run_stage(StageRun { name: "a", cfg, run_dir: inputs.run_dir }, model, set, &[], excluded)
}

/// Emotion recognition: cross-entropy over the label tokens at the last position.
/// With `behaviors` absent (or `flags` empty) this is the text-and-media baseline.
pub fn stage_b_train(
    inputs: &TrainInputs,
    labels: &EmotionLabelSet,
    behaviors: Option<&BehaviorCache>,
    flags: BehaviorFlags,
    model: &mut TinyDecoder,
    cfg: &TrainingConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    if cfg.reinit_lora {
        model.reinit_trainable(cfg.seed);
    }
    let examples = build_merc_examples(inputs, labels, behaviors, flags, true)?;
    if examples.is_empty() {
        return Err(Error::Config("stage B has no labeled training examples".into()));
    }
    let candidates = label_token_ids(model, labels)?;
    let set = examples
        .iter()
        .map(|ex| {
            let gold = ex.gold.as_deref().expect("labeled examples");
            let k = labels.index_of(gold).expect("validated label");
            compile(model, ex, Target::Label(k))
        })
        .collect::<Result<Vec<_>>>()?;
    run_stage(StageRun { name: "b", cfg, run_dir: inputs.run_dir }, model, set, &candidates, Vec::new())
}

/// Predictions for prepared examples, in order.
pub fn predict_examples(model: &TinyDecoder, examples: &[MercExample], labels: &EmotionLabelSet) -> Result<Vec<Prediction>> {
    examples
        .par_iter()
        .map(|ex| {
            let feats = ModalityFeatures::new(ex.raw.clone(), &model.trainable.video, &model.trainable.audio)?;
            predict(model, &ex.utterance_id, &ex.prompt, &feats, labels)
        })
        .collect()
}
