//! Run configuration: one TOML file with `${VAR}` interpolation, overridden by flags.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use regex::Regex;
use serde::{Deserialize, Serialize};

use merc_core::behavior::{GenerationOptions, GenerationParams, HttpClientConfig, HttpMllmClient, MllmClient, MockMllmClient};
use merc_core::corpus::{load_manifest, CorpusManifest, EmotionLabelSet, Split, DEFAULT_MAX_TURNS};
use merc_core::features::{AudioFrameSpec, FeatureExtractor, FrameSampleSpec, MediaResolver};
use merc_core::pipeline::PipelineSettings;
use merc_core::prompting::{BehaviorFlags, StructuredTemplate};
use merc_core::tuning::{DecoderConfig, TrainingConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelSetSpec {
    Named(String),
    Labels(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Base directory for relative media refs; defaults to the train file's directory.
    #[serde(default)]
    pub media_dir: Option<PathBuf>,
    /// Defaults to `behaviors.jsonl` in the output directory.
    #[serde(default)]
    pub behavior_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    #[serde(default)]
    pub behavior: Option<PathBuf>,
    #[serde(default)]
    pub merc: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientConfig {
    /// Answers from a JSON object mapping media refs to responses.
    Mock {
        #[serde(default = "default_mock_model")]
        model: String,
        #[serde(default)]
        script: Option<PathBuf>,
        #[serde(default)]
        default_response: Option<String>,
    },
    Http(HttpClientConfig),
}

fn default_mock_model() -> String {
    "mock".into()
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig::Mock { model: default_mock_model(), script: None, default_response: None }
    }
}

impl ClientConfig {
    pub fn build(&self) -> Result<Box<dyn MllmClient>> {
        Ok(match self {
            ClientConfig::Mock { model, script, default_response } => {
                let table: HashMap<String, String> = match script {
                    Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading mock script {}", p.display()))?)
                        .with_context(|| format!("parsing mock script {}", p.display()))?,
                    None => HashMap::new(),
                };
                Box::new(MockMllmClient::scripted(model.clone(), table, default_response.clone()))
            }
            ClientConfig::Http(cfg) => Box::new(HttpMllmClient::new(cfg.clone())?),
        })
    }

    fn resolve(&mut self, base: &Path) {
        if let ClientConfig::Mock { script: Some(p), .. } = self {
            *p = base.join(&*p);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub include_history: bool,
    pub max_concurrency: usize,
    /// Largest tolerated share of failed utterances before the command fails.
    pub max_failure_rate: f64,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let p = GenerationParams::default();
        Self {
            max_retries: 3,
            backoff_ms: 500,
            include_history: false,
            max_concurrency: 4,
            max_failure_rate: 0.05,
            temperature: p.temperature,
            max_output_tokens: p.max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub frames: FrameSampleSpec,
    pub audio: AudioFrameSpec,
    pub audio_cap: usize,
    pub d_video: usize,
    pub d_audio: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { frames: FrameSampleSpec::default(), audio: AudioFrameSpec::default(), audio_cap: 16, d_video: 32, d_audio: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub label_set: LabelSetSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// When set, drives every seed: training shuffles, frame sampling and base weights.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Comma list of `facial`, `body`, `posture`, or `all` / `none`.
    #[serde(default = "default_behaviors")]
    pub behaviors: String,
    #[serde(default = "default_max_turns")]
    pub max_turns: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub templates: TemplateConfig,
    #[serde(default)]
    pub client: ClientConfig,
    /// Client queried by zero-shot evaluation; defaults to `client`.
    #[serde(default)]
    pub zero_shot_client: Option<ClientConfig>,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub stage_a: TrainingConfig,
    #[serde(default)]
    pub stage_b: TrainingConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_behaviors() -> String {
    "all".into()
}

fn default_max_turns() -> usize {
    DEFAULT_MAX_TURNS
}

static VAR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());

/// Replaces `${NAME}` with the value of environment variable `NAME`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut missing = Vec::new();
    let out = VAR.replace_all(text, |c: &regex::Captures| match lookup(&c[1]) {
        Some(v) => v,
        None => {
            missing.push(c[1].to_string());
            String::new()
        }
    });
    if !missing.is_empty() {
        bail!("config references unset environment variable(s): {}", missing.join(", "));
    }
    Ok(out.into_owned())
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub behaviors: Option<String>,
}

/// A validated configuration with paths resolved and overrides applied.
pub struct Loaded {
    pub config: RunConfig,
    /// The file as written, before interpolation.
    pub raw: String,
    pub labels: EmotionLabelSet,
    pub flags: BehaviorFlags,
    pub behavior_template: (StructuredTemplate, String),
    pub merc_template: (StructuredTemplate, String),
}

impl Loaded {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let raw = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let text = interpolate(&raw, |k| std::env::var(k).ok())?;
        let mut config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve_paths(&base);
        if let Some(seed) = overrides.seed {
            config.seed = Some(seed);
        }
        if let Some(dir) = &overrides.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(b) = &overrides.behaviors {
            config.behaviors = b.clone();
        }
        if let Some(seed) = config.seed {
            config.stage_a.seed = seed;
            config.stage_b.seed = seed;
            config.features.frames.rng_seed = seed;
            config.decoder.base_seed = seed;
        }
        let labels = match &config.label_set {
            LabelSetSpec::Named(n) => EmotionLabelSet::by_name(n).with_context(|| format!("unknown label set {n:?}"))?,
            LabelSetSpec::Labels(l) => EmotionLabelSet::new(l.iter().cloned())?,
        };
        let flags: BehaviorFlags = config.behaviors.parse()?;
        let load_template = |p: &Option<PathBuf>, default: fn() -> StructuredTemplate| -> Result<(StructuredTemplate, String)> {
            Ok(match p {
                Some(p) => StructuredTemplate::load(p).with_context(|| format!("loading template {}", p.display()))?,
                None => {
                    let t = default();
                    let text = t.render_file();
                    (t, text)
                }
            })
        };
        let behavior_template = load_template(&config.templates.behavior, StructuredTemplate::behavior_default)?;
        let merc_template = load_template(&config.templates.merc, StructuredTemplate::merc_default)?;
        let loaded = Self { config, raw, labels, flags, behavior_template, merc_template };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        for p in [Some(&c.data.train), c.data.dev.as_ref(), c.data.test.as_ref()].into_iter().flatten() {
            if !p.is_file() {
                bail!("data file {} does not exist", p.display());
            }
        }
        if let ClientConfig::Mock { script: Some(p), .. } = &c.client {
            if !p.is_file() {
                bail!("mock client script {} does not exist", p.display());
            }
        }
        if c.features.d_video != c.decoder.d_video || c.features.d_audio != c.decoder.d_audio {
            bail!(
                "feature widths {}/{} do not match decoder adapter inputs {}/{}",
                c.features.d_video,
                c.features.d_audio,
                c.decoder.d_video,
                c.decoder.d_audio
            );
        }
        if !(0.0..=1.0).contains(&c.generation.max_failure_rate) {
            bail!("generation.max_failure_rate must lie in [0, 1]");
        }
        c.features.frames.validate()?;
        c.decoder.validate()?;
        c.stage_a.validate()?;
        c.stage_b.validate()?;
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn behavior_cache_path(&self) -> PathBuf {
        self.config.data.behavior_cache.clone().unwrap_or_else(|| self.output_dir().join("behaviors.jsonl"))
    }

    pub fn split_path(&self, split: Split) -> Result<&Path> {
        let d = &self.config.data;
        match split {
            Split::Train => Some(d.train.as_path()),
            Split::Dev => d.dev.as_deref(),
            Split::Test => d.test.as_deref(),
        }
        .with_context(|| format!("no {split} file configured under [data]"))
    }

    pub fn manifest(&self, split: Split) -> Result<CorpusManifest> {
        let path = self.split_path(split)?;
        load_manifest(path, split, self.labels.clone()).with_context(|| format!("loading {split} split from {}", path.display()))
    }

    pub fn generation_options(&self) -> GenerationOptions {
        let g = &self.config.generation;
        GenerationOptions {
            max_retries: g.max_retries,
            backoff_base: Duration::from_millis(g.backoff_ms),
            include_history: g.include_history,
            max_turns: self.config.max_turns,
            params: GenerationParams { temperature: g.temperature, max_output_tokens: g.max_output_tokens },
        }
    }

    pub fn extractor(&self) -> FeatureExtractor {
        let f = &self.config.features;
        let mut ex = FeatureExtractor::mock(f.frames, f.audio, f.audio_cap, f.d_video, f.d_audio);
        let media = self.config.data.media_dir.clone().or_else(|| self.config.data.train.parent().map(Path::to_path_buf));
        if let Some(dir) = media {
            ex.media = MediaResolver::new(dir);
        }
        ex
    }

    pub fn settings(&self) -> PipelineSettings {
        let c = &self.config;
        PipelineSettings {
            labels: self.labels.clone(),
            decoder: c.decoder.clone(),
            stage_a: c.stage_a.clone(),
            stage_b: c.stage_b.clone(),
            max_turns: c.max_turns,
            behavior_template: self.behavior_template.0.clone(),
            merc_template: self.merc_template.0.clone(),
        }
    }
}

impl RunConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| *p = base.join(&*p);
        join(&mut self.output_dir);
        join(&mut self.data.train);
        for p in [&mut self.data.dev, &mut self.data.test, &mut self.data.media_dir, &mut self.data.behavior_cache].into_iter().flatten() {
            join(p);
        }
        for p in [&mut self.templates.behavior, &mut self.templates.merc].into_iter().flatten() {
            join(p);
        }
        self.client.resolve(base);
        if let Some(c) = &mut self.zero_shot_client {
            c.resolve(base);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation() {
        let env = |k: &str| (k == "TOKEN").then(|| "s3cret".to_string());
        assert_eq!(interpolate("a = \"${TOKEN}\"", env).unwrap(), "a = \"s3cret\"");
        assert_eq!(interpolate("plain $HOME", env).unwrap(), "plain $HOME");
        let err = interpolate("${NOPE} ${ALSO}", env).unwrap_err().to_string();
        assert!(err.contains("NOPE") && err.contains("ALSO"), "{err}");
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c: RunConfig = toml::from_str("label_set = \"meld\"\n[data]\ntrain = \"t.jsonl\"\n").unwrap();
        assert!(matches!(c.client, ClientConfig::Mock { .. }));
        assert_eq!(c.behaviors, "all");
        assert_eq!(c.generation.max_failure_rate, 0.05);
        assert_eq!(c.decoder, DecoderConfig::default());
        let c: RunConfig = toml::from_str(
            "label_set = [\"a\", \"b\"]\n[data]\ntrain = \"t\"\n[client]\nkind = \"http\"\nendpoint = \"http://x\"\nmodel = \"m\"\n[decoder]\nd_model = 32\n",
        )
        .unwrap();
        assert!(matches!(c.label_set, LabelSetSpec::Labels(ref l) if l.len() == 2));
        assert!(matches!(c.client, ClientConfig::Http(ref h) if h.timeout_secs == 60));
        assert_eq!(c.decoder.d_model, 32);
        assert_eq!(c.decoder.vocab_size, DecoderConfig::default().vocab_size);
        assert!(toml::from_str::<RunConfig>("label_set = \"meld\"\nbogus = 1\n[data]\ntrain = \"t\"\n").is_err());
    }
}
