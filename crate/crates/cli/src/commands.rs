use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use merc_core::behavior::{generate_all, BehaviorCache, GenerationSummary};
use merc_core::corpus::{CorpusManifest, EmotionLabelSet, Split};
use merc_core::eval::{ablation_csv, canonical_ablation_configs, run_ablation_suite, write_evaluation_bundle, zero_shot_eval, EvaluationBundle, MetricsReport};
use merc_core::features::{FeatureCache, FeatureMap};
use merc_core::fixtures::toy_fixture;
use merc_core::pipeline::{evaluate_model, extract_features, run_experiment, Evaluation};
use merc_core::prompting::{checksum, BehaviorFlags};
use merc_core::tuning::{build_merc_examples, load_checkpoint, stage_a_train, stage_b_train, MercExample, StageReport, TinyDecoder, TrainInputs};

use crate::config::Loaded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Align,
    Merc,
    Both,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write(path, serde_json::to_vec_pretty(value)?)
}

/// Records what is needed to re-run this command: the config as written,
/// resolved seeds, flags and template checksums. `run_meta.json` describes
/// the latest command; `run_history.jsonl` keeps one line per command.
pub fn write_run_meta(l: &Loaded, command: &str) -> Result<()> {
    let out = l.output_dir();
    write(&out.join("config.toml"), &l.raw)?;
    let c = &l.config;
    let meta = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "seeds": {
            "seed": c.seed,
            "stage_a": c.stage_a.seed,
            "stage_b": c.stage_b.seed,
            "frames": c.features.frames.rng_seed,
            "base_weights": c.decoder.base_seed,
        },
        "behaviors": l.flags.to_string(),
        "labels": l.labels.labels(),
        "templates": {
            "behavior": checksum(&l.behavior_template.1),
            "merc": checksum(&l.merc_template.1),
        },
        "feature_spec": l.extractor().spec_hash(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&out.join("run_meta.json"), &meta)?;
    let history = out.join("run_history.jsonl");
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&history).with_context(|| format!("opening {}", history.display()))?;
    writeln!(f, "{}", serde_json::to_string(&meta)?).with_context(|| format!("writing {}", history.display()))
}

fn features(l: &Loaded, manifests: &[&CorpusManifest]) -> Result<FeatureMap> {
    let extractor = l.extractor();
    let cache = FeatureCache::new(l.output_dir().join("features"));
    let mut all = FeatureMap::new();
    for m in manifests {
        all.extend(extract_features(&extractor, m, Some(&cache))?);
    }
    Ok(all)
}

/// The behavior cache, which must annotate at least one utterance of `manifest`.
fn require_behaviors(l: &Loaded, manifest: &CorpusManifest) -> Result<BehaviorCache> {
    let path = l.behavior_cache_path();
    let cache = BehaviorCache::open(&path)?;
    let annotated = manifest.utterances().filter(|r| cache.get(&r.utterance.id).is_some()).count();
    if annotated == 0 {
        bail!(
            "no behavior annotations for the {} split in {}; run `merc generate-behaviors --split {}` first",
            manifest.split,
            path.display(),
            manifest.split
        );
    }
    if annotated < manifest.n_utterances() {
        log::warn!("{} of {} {} utterances have behavior annotations", annotated, manifest.n_utterances(), manifest.split);
    }
    Ok(cache)
}

fn prompts_jsonl(examples: &[MercExample]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(&json!({"utterance_id": e.utterance_id, "prompt": e.prompt.text}))?);
        out.push('\n');
    }
    Ok(out)
}

/// The highest-numbered `epoch_N` directory under `stage_dir`.
pub fn latest_checkpoint(stage_dir: &Path) -> Option<PathBuf> {
    fs::read_dir(stage_dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let n: usize = e.file_name().to_str()?.strip_prefix("epoch_")?.parse().ok()?;
            e.path().join("params.bin").is_file().then(|| (n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

fn clear_stage(dir: &Path) -> Result<()> {
    if dir.exists() {
        log::info!("replacing previous run in {}", dir.display());
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    Ok(())
}

fn print_stage(r: &StageReport) {
    print!("stage {}: {} examples, {} steps, loss {:.4} -> {:.4}", r.stage, r.n_examples, r.steps, r.initial_loss, r.final_loss);
    if let Some(acc) = r.final_accuracy {
        print!(", train accuracy {acc:.4}");
    }
    println!();
    if let Some(last) = r.checkpoints.last() {
        println!("  checkpoint: {}", last.display());
    }
}

fn print_metrics(m: &MetricsReport) {
    println!("accuracy {:.4}  weighted F1 {:.4}  ({} examples)", m.overall_accuracy, m.weighted_f1, m.n_examples);
    for (label, c) in &m.per_class {
        println!("  {label:<12} acc {:.4}  f1 {:.4}  support {}", c.accuracy, c.f1, c.support);
    }
}

pub fn parse_splits(s: &str) -> Result<Vec<Split>> {
    if s == "all" {
        return Ok(vec![Split::Train, Split::Dev, Split::Test]);
    }
    s.split(',').map(|p| Ok(p.trim().parse()?)).collect()
}

pub fn generate_behaviors(l: &Loaded, splits: &[Split]) -> Result<()> {
    write_run_meta(l, "generate-behaviors")?;
    let client = l.config.client.build()?;
    let cache_path = l.behavior_cache_path();
    if let Some(parent) = cache_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let cache = BehaviorCache::open(&cache_path)?;
    let opts = l.generation_options();
    let mut total = GenerationSummary::default();
    for &split in splits {
        if l.split_path(split).is_err() && splits.len() > 1 {
            continue;
        }
        let manifest = l.manifest(split)?;
        let s = generate_all(client.as_ref(), &manifest, &l.behavior_template.0, &cache, &opts, l.config.generation.max_concurrency)?;
        println!(
            "{split}: coverage {}/{} ({:.1}%), generated {}, already cached {}, parse failures {}, transport failures {}",
            s.annotated(),
            s.total,
            100.0 * s.coverage(),
            s.generated,
            s.already_cached,
            s.parse_failures,
            s.transport_failures
        );
        total.total += s.total;
        total.already_cached += s.already_cached;
        total.generated += s.generated;
        total.parse_failures += s.parse_failures;
        total.transport_failures += s.transport_failures;
    }
    write_json(&l.output_dir().join("behavior_summary.json"), &total)?;
    println!("cache: {}", cache_path.display());
    let max = l.config.generation.max_failure_rate;
    if total.failure_rate() > max {
        bail!(
            "{} of {} utterances failed ({:.1}% > {:.1}% allowed): {} transport failures, {} parse failures; details in the failure log next to {}",
            total.parse_failures + total.transport_failures,
            total.total,
            100.0 * total.failure_rate(),
            100.0 * max,
            total.transport_failures,
            total.parse_failures,
            cache_path.display()
        );
    }
    Ok(())
}

pub fn train(l: &Loaded, stage: Stage, baseline: bool, init: Option<&Path>) -> Result<()> {
    write_run_meta(l, "train")?;
    let out = l.output_dir();
    let train = l.manifest(Split::Train)?;
    let feats = features(l, &[&train])?;
    let settings = l.settings();
    let mut aligned = None;
    if matches!(stage, Stage::Align | Stage::Both) {
        if baseline {
            bail!("--baseline trains without behavior alignment; use `merc train --stage merc --baseline`");
        }
        if !l.flags.any() {
            bail!("behavior alignment needs at least one behavior type; set --behaviors");
        }
        let cache = require_behaviors(l, &train)?;
        clear_stage(&out.join("stage_a"))?;
        let inputs = TrainInputs { manifest: &train, features: &feats, template: &settings.behavior_template, max_turns: settings.max_turns, run_dir: Some(out) };
        let mut model = TinyDecoder::new(settings.decoder.clone())?;
        let report = stage_a_train(&inputs, &cache, l.flags, &mut model, &settings.stage_a)?;
        print_stage(&report);
        aligned = Some(model);
    }
    if matches!(stage, Stage::Merc | Stage::Both) {
        let (mut model, init_desc) = if baseline {
            (TinyDecoder::new(settings.decoder.clone())?, None)
        } else if let Some(m) = aligned {
            (m, latest_checkpoint(&out.join("stage_a")))
        } else {
            let dir = match init {
                Some(d) => d.to_path_buf(),
                None => latest_checkpoint(&out.join("stage_a")).with_context(|| {
                    format!(
                        "no stage-A checkpoint under {}; run `merc train --stage align` first, pass --init <checkpoint>, or use --baseline",
                        out.join("stage_a").display()
                    )
                })?,
            };
            let (m, meta) = load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            if meta.stage != "a" {
                bail!("{} is a stage-{} checkpoint; stage B starts from a stage-A checkpoint", dir.display(), meta.stage);
            }
            (m, Some(dir))
        };
        let flags = if baseline { BehaviorFlags::NONE } else { l.flags };
        let cache = if flags.any() { Some(require_behaviors(l, &train)?) } else { None };
        let stage_dir = out.join("stage_b");
        clear_stage(&stage_dir)?;
        let inputs = TrainInputs { manifest: &train, features: &feats, template: &settings.merc_template, max_turns: settings.max_turns, run_dir: Some(out) };
        let examples = build_merc_examples(&inputs, &l.labels, cache.as_ref(), flags, true)?;
        write(&stage_dir.join("prompts.jsonl"), prompts_jsonl(&examples)?)?;
        let report = stage_b_train(&inputs, &l.labels, cache.as_ref(), flags, &mut model, &settings.stage_b)?;
        write_json(&stage_dir.join("training.json"), &json!({ "behaviors": flags, "baseline": baseline, "init": init_desc }))?;
        print_stage(&report);
    }
    Ok(())
}

fn write_evaluation(dir: &Path, labels: &EmotionLabelSet, ev: &Evaluation) -> Result<()> {
    write_evaluation_bundle(dir, &EvaluationBundle { report: &ev.report, labels, gold: &ev.gold, predictions: &ev.predictions })?;
    write(&dir.join("prompts.jsonl"), prompts_jsonl(&ev.examples)?)
}

pub fn evaluate(l: &Loaded, checkpoint: Option<&Path>, split: Split, baseline: bool, behaviors_flag: bool) -> Result<()> {
    write_run_meta(l, "evaluate")?;
    let out = l.output_dir();
    let dir = match checkpoint {
        Some(d) => d.to_path_buf(),
        None => latest_checkpoint(&out.join("stage_b"))
            .with_context(|| format!("no stage-B checkpoint under {}; run `merc train --stage merc` first or pass --checkpoint", out.join("stage_b").display()))?,
    };
    let (model, meta) = load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if meta.stage != "b" {
        log::warn!("{} is a stage-{} checkpoint; label predictions come from an untuned head", dir.display(), meta.stage);
    }
    let trained_with = dir
        .parent()
        .map(|p| p.join("training.json"))
        .and_then(|p| fs::read(p).ok())
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .and_then(|v| serde_json::from_value::<BehaviorFlags>(v["behaviors"].clone()).ok());
    let flags = if baseline {
        BehaviorFlags::NONE
    } else if behaviors_flag {
        l.flags
    } else {
        trained_with.unwrap_or(l.flags)
    };
    let manifest = l.manifest(split)?;
    let feats = features(l, &[&manifest])?;
    let cache = if flags.any() { Some(require_behaviors(l, &manifest)?) } else { None };
    let ev = evaluate_model(&model, &l.settings(), &manifest, &feats, cache.as_ref(), flags)?;
    let eval_dir = out.join("eval").join(split.to_string());
    write_evaluation(&eval_dir, &l.labels, &ev)?;
    println!("checkpoint {} on {split} (behaviors: {flags})", dir.display());
    print_metrics(&ev.report);
    println!("reports: {}", eval_dir.display());
    Ok(())
}

pub fn ablate(l: &Loaded, split: Split) -> Result<()> {
    write_run_meta(l, "ablate")?;
    let out = l.output_dir().join("ablation");
    let train = l.manifest(Split::Train)?;
    let eval = l.manifest(split)?;
    let feats = features(l, &[&train, &eval])?;
    let cache = require_behaviors(l, &train)?;
    let settings = l.settings();
    let rows = run_ablation_suite(&canonical_ablation_configs(), |c| {
        let dir = out.join(&c.id);
        clear_stage(&dir).map_err(|e| merc_core::Error::Config(e.to_string()))?;
        let r = run_experiment(&settings, &train, &eval, &feats, &cache, c.flags, Some(&dir))?;
        write_evaluation(&dir.join("eval"), &l.labels, &r.evaluation).map_err(|e| merc_core::Error::Config(e.to_string()))?;
        println!("{:<10} {:<16} accuracy {:.4}  weighted F1 {:.4}", c.id, c.row, r.evaluation.report.overall_accuracy, r.evaluation.report.weighted_f1);
        Ok(r.summary.report)
    })?;
    let csv = ablation_csv(&rows);
    write(&out.join("ablation.csv"), &csv)?;
    write_json(&out.join("ablation.json"), &rows)?;
    print!("{csv}");
    Ok(())
}

pub fn zero_shot(l: &Loaded, split: Split, with_behavior: bool) -> Result<()> {
    write_run_meta(l, "zero-shot")?;
    let client = l.config.zero_shot_client.as_ref().unwrap_or(&l.config.client).build()?;
    let manifest = l.manifest(split)?;
    let cache = if with_behavior { Some(require_behaviors(l, &manifest)?) } else { None };
    let report = zero_shot_eval(
        client.as_ref(),
        &manifest,
        &l.merc_template.0,
        &l.labels,
        cache.as_ref(),
        with_behavior,
        &l.generation_options(),
        l.config.generation.max_concurrency,
    )?;
    let dir = l.output_dir().join("zero_shot").join(split.to_string());
    write_json(&dir.join("report.json"), &report.metrics)?;
    write(&dir.join("report.csv"), report.metrics.to_csv())?;
    let mut outcomes = String::new();
    for (id, gold, outcome) in &report.outcomes {
        outcomes.push_str(&serde_json::to_string(&json!({"utterance_id": id, "gold": gold, "outcome": outcome}))?);
        outcomes.push('\n');
    }
    write(&dir.join("outcomes.jsonl"), outcomes)?;
    println!("zero-shot on {split} with {} (behaviors: {})", client.model_name(), if with_behavior { "yes" } else { "no" });
    print_metrics(&report.metrics);
    println!("invalid answers {}, failed requests {}", report.invalid, report.failed);
    println!("reports: {}", dir.display());
    Ok(())
}

/// Writes the synthetic corpus, mock client scripts and a matching config into `dir`.
pub fn fixture(dir: &Path, n_conversations: usize, labels: &str, small: bool) -> Result<()> {
    let labels = EmotionLabelSet::new(labels.split(',').map(str::trim))?;
    let fx = toy_fixture(n_conversations, labels.clone())?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fx.manifest.write(dir.join("train.jsonl"))?;
    let script: std::collections::BTreeMap<_, _> = fx.behavior_script.iter().collect();
    write_json(&dir.join("behavior_script.json"), &script)?;
    let answers: std::collections::BTreeMap<_, _> = fx
        .manifest
        .labeled()
        .map(|r| (r.utterance.video_ref.clone().unwrap_or_default(), r.utterance.label.clone().unwrap_or_default()))
        .collect();
    write_json(&dir.join("zero_shot_script.json"), &answers)?;
    let label_list = labels.labels().iter().map(|l| format!("{l:?}")).collect::<Vec<_>>().join(", ");
    let (decoder, epochs) = if small {
        ("vocab_size = 1024\nd_model = 16\nn_layers = 1\nd_ff = 32\nlora_rank = 4\nlora_alpha = 8.0\nd_video = 16\nd_audio = 16\n", 4)
    } else {
        ("d_video = 32\nd_audio = 32\n", 20)
    };
    let d = if small { 16 } else { 32 };
    let config = format!(
        r#"label_set = [{label_list}]
output_dir = "run"
seed = 0
behaviors = "all"

[data]
train = "train.jsonl"
test = "train.jsonl"

[client]
kind = "mock"
model = "scripted-behavior"
script = "behavior_script.json"

[zero_shot_client]
kind = "mock"
model = "scripted-label"
script = "zero_shot_script.json"

[generation]
backoff_ms = 0

[features]
audio_cap = 16
d_video = {d}
d_audio = {d}

[features.frames]
n_frames = 8
height = 32
width = 32

[decoder]
{decoder}
[stage_a]
learning_rate = 0.01
epochs = {epochs}
lambda_l2 = 0.0
batch_size = 8

[stage_b]
learning_rate = 0.01
epochs = {epochs}
lambda_l2 = 0.0
batch_size = 8
"#
    );
    write(&dir.join("merc.toml"), config)?;
    println!("wrote {} conversations and merc.toml to {}", n_conversations, dir.display());
    Ok(())
}
