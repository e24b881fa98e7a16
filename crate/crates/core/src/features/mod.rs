//! Modality features: frame sampling, audio windowing, encoders, and the
//! fully connected adapters that project encoder outputs to the language
//! model's embedding width.

mod adapter;
mod cache;
mod encoders;
mod media;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adapter::{Adapter, AdapterCache, AdapterGrads, Affine};
pub use cache::FeatureCache;
pub use encoders::{
    encode_audio, encode_video, AudioEncoder, EnergyEncoder, PooledPixelEncoder, VideoEncoder,
};
pub use media::{AudioClip, FrameDirSource, MediaResolver, SyntheticVideo, VideoSource};

use crate::corpus::Utterance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameSampleSpec {
    pub n_frames: usize,
    pub height: u32,
    pub width: u32,
    pub rng_seed: u64,
}

impl Default for FrameSampleSpec {
    fn default() -> Self {
        Self {
            n_frames: 64,
            height: 336,
            width: 336,
            rng_seed: 0,
        }
    }
}

impl FrameSampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("invalid frame sample spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioFrameSpec {
    pub stride_seconds: f64,
}

impl Default for AudioFrameSpec {
    fn default() -> Self {
        Self { stride_seconds: 2.0 }
    }
}

/// Shortest trailing audio piece kept as its own window.
pub const MIN_TAIL_SECONDS: f64 = 0.5;

/// `spec.n_frames` ascending frame indices in `[0, total_frames)`: distinct
/// when the clip is long enough, otherwise drawn with replacement.
pub fn sample_frame_indices(total_frames: usize, spec: &FrameSampleSpec) -> Result<Vec<usize>> {
    if total_frames == 0 {
        return Err(Error::Input("video has no frames".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut picked = if total_frames >= spec.n_frames {
        index::sample(&mut rng, total_frames, spec.n_frames).into_vec()
    } else {
        (0..spec.n_frames)
            .map(|_| rng.random_range(0..total_frames))
            .collect()
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Half-open windows of `stride_seconds` tiling `[0, duration)`. A tail
/// shorter than [`MIN_TAIL_SECONDS`] is merged into the previous window.
pub fn segment_audio(duration_seconds: f64, spec: &AudioFrameSpec) -> Result<Vec<(f64, f64)>> {
    if !(duration_seconds > 0.0) || !duration_seconds.is_finite() {
        return Err(Error::Input(format!("audio duration must be positive, got {duration_seconds}")));
    }
    if !(spec.stride_seconds > 0.0) {
        return Err(Error::Config(format!("audio stride must be positive, got {}", spec.stride_seconds)));
    }
    let stride = spec.stride_seconds;
    let n_full = (duration_seconds / stride).floor() as usize;
    let mut windows: Vec<(f64, f64)> = (0..n_full)
        .map(|k| (k as f64 * stride, (k + 1) as f64 * stride))
        .collect();
    // Guard against floor() landing one window past the end.
    while windows.last().is_some_and(|w| w.1 > duration_seconds) {
        windows.pop();
    }
    let covered = windows.last().map_or(0.0, |w| w.1);
    let tail = duration_seconds - covered;
    if tail > 0.0 {
        if tail >= MIN_TAIL_SECONDS || windows.is_empty() {
            windows.push((covered, duration_seconds));
        } else {
            windows.last_mut().unwrap().1 = duration_seconds;
        }
    }
    Ok(windows)
}

/// Encoder outputs and their adapted projections for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub video_features: Array2<f64>,
    pub audio_features: Array2<f64>,
    pub adapted_video: Array2<f64>,
    pub adapted_audio: Array2<f64>,
}

impl ModalityFeatures {
    pub fn new(raw: RawFeatures, video: &Adapter, audio: &Adapter) -> Result<Self> {
        let adapted_video = video.forward(&raw.video)?;
        let adapted_audio = audio.forward(&raw.audio)?;
        Ok(Self {
            video_features: raw.video,
            audio_features: raw.audio,
            adapted_video,
            adapted_audio,
        })
    }

    pub fn empty(d_model: usize) -> Self {
        Self {
            video_features: Array2::zeros((0, 0)),
            audio_features: Array2::zeros((0, 0)),
            adapted_video: Array2::zeros((0, d_model)),
            adapted_audio: Array2::zeros((0, d_model)),
        }
    }
}

/// Raw features keyed by utterance id.
pub type FeatureMap = std::collections::BTreeMap<String, RawFeatures>;

/// Encoder outputs before adaptation. Rows may be zero when a modality is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub video: Array2<f64>,
    pub audio: Array2<f64>,
}

/// Frame/audio sampling plus encoders, resolving media refs of utterances.
pub struct FeatureExtractor {
    pub frames: FrameSampleSpec,
    pub audio: AudioFrameSpec,
    /// Upper bound on audio rows; longer clips are mean-pooled down to it.
    pub audio_cap: usize,
    pub video_encoder: Box<dyn VideoEncoder>,
    pub audio_encoder: Box<dyn AudioEncoder>,
    pub media: MediaResolver,
}

impl FeatureExtractor {
    pub fn mock(frames: FrameSampleSpec, audio: AudioFrameSpec, audio_cap: usize, d_video: usize, d_audio: usize) -> Self {
        Self {
            frames,
            audio,
            audio_cap,
            video_encoder: Box::new(PooledPixelEncoder::with_dim(d_video)),
            audio_encoder: Box::new(EnergyEncoder::new(d_audio)),
            media: MediaResolver::default(),
        }
    }

    pub fn d_video(&self) -> usize {
        self.video_encoder.dim()
    }

    pub fn d_audio(&self) -> usize {
        self.audio_encoder.dim()
    }

    /// Hash of everything that determines extracted features.
    pub fn spec_hash(&self) -> String {
        let desc = serde_json::json!({
            "frames": self.frames,
            "audio": self.audio,
            "audio_cap": self.audio_cap,
            "video_encoder": self.video_encoder.name(),
            "d_video": self.d_video(),
            "audio_encoder": self.audio_encoder.name(),
            "d_audio": self.d_audio(),
        });
        hex::encode(&Sha256::digest(desc.to_string().as_bytes())[..8])
    }

    pub fn spec_json(&self) -> serde_json::Value {
        serde_json::json!({
            "frames": self.frames,
            "audio": self.audio,
            "audio_cap": self.audio_cap,
            "video_encoder": self.video_encoder.name(),
            "d_video": self.d_video(),
            "audio_encoder": self.audio_encoder.name(),
            "d_audio": self.d_audio(),
        })
    }

    pub fn extract(&self, utt: &Utterance) -> Result<RawFeatures> {
        let video = match &utt.video_ref {
            Some(r) => {
                let source = self.media.video(r)?;
                let mut spec = self.frames;
                spec.rng_seed ^= stable_hash(&utt.id);
                let idx = sample_frame_indices(source.total_frames(), &spec)?;
                let frames = idx
                    .iter()
                    .map(|&i| {
                        source.frame(i).map(|f| media::resize(&f, spec.width, spec.height))
                    })
                    .collect::<Result<Vec<_>>>()?;
                encode_video(&frames, self.video_encoder.as_ref())?
            }
            None => Array2::zeros((0, self.d_video())),
        };
        let audio = match &utt.audio_ref {
            Some(r) => {
                let clip = self.media.audio(r)?;
                let windows = segment_audio(clip.duration_seconds(), &self.audio)?;
                let slices: Vec<&[f32]> = windows.iter().map(|&(s, e)| clip.slice(s, e)).collect();
                let rows = encode_audio(&slices, clip.sample_rate, self.audio_encoder.as_ref())?;
                pool_rows(rows, self.audio_cap)
            }
            None => Array2::zeros((0, self.d_audio())),
        };
        Ok(RawFeatures { video, audio })
    }
}

/// Mean-pools consecutive rows so that at most `cap` remain.
pub fn pool_rows(rows: Array2<f64>, cap: usize) -> Array2<f64> {
    let n = rows.nrows();
    if n <= cap || cap == 0 {
        return if cap == 0 { Array2::zeros((0, rows.ncols())) } else { rows };
    }
    let mut out = Array2::zeros((cap, rows.ncols()));
    for g in 0..cap {
        let start = g * n / cap;
        let end = (g + 1) * n / cap;
        let chunk = rows.slice(ndarray::s![start..end, ..]);
        out.row_mut(g).assign(&chunk.mean_axis(ndarray::Axis(0)).unwrap());
    }
    out
}

/// FNV-1a, stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n: usize, seed: u64) -> FrameSampleSpec {
        FrameSampleSpec { n_frames: n, height: 8, width: 8, rng_seed: seed }
    }

    #[test]
    fn full_population_is_identity() {
        assert_eq!(sample_frame_indices(64, &spec(64, 3)).unwrap(), (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn long_clip_gives_distinct_indices() {
        for seed in 0..20 {
            let idx = sample_frame_indices(200, &spec(64, seed)).unwrap();
            assert_eq!(idx.len(), 64);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(*idx.last().unwrap() < 200);
        }
    }

    #[test]
    fn short_clip_samples_with_replacement() {
        let idx = sample_frame_indices(10, &spec(64, 1)).unwrap();
        assert_eq!(idx.len(), 64);
        assert!(idx.iter().all(|&i| i < 10));
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn zero_frames_is_an_error() {
        assert!(sample_frame_indices(0, &spec(4, 0)).is_err());
    }

    #[test]
    fn audio_segmentation_examples() {
        let s = AudioFrameSpec::default();
        assert_eq!(segment_audio(6.0, &s).unwrap(), vec![(0.0, 2.0), (2.0, 4.0), (4.0, 6.0)]);
        assert_eq!(segment_audio(1.5, &s).unwrap(), vec![(0.0, 1.5)]);
        assert_eq!(segment_audio(4.3, &s).unwrap(), vec![(0.0, 2.0), (2.0, 4.3)]);
        assert_eq!(segment_audio(4.5, &s).unwrap(), vec![(0.0, 2.0), (2.0, 4.0), (4.0, 4.5)]);
        assert_eq!(segment_audio(0.2, &s).unwrap(), vec![(0.0, 0.2)]);
        assert!(segment_audio(0.0, &s).is_err());
        assert!(segment_audio(-1.0, &s).is_err());
    }

    #[test]
    fn pooling_caps_rows() {
        let rows = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64);
        let pooled = pool_rows(rows.clone(), 2);
        assert_eq!(pooled.nrows(), 2);
        assert_eq!(pooled.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(pooled.row(1).to_vec(), vec![6.0, 7.0]);
        assert_eq!(pool_rows(rows.clone(), 16), rows);
    }

    #[test]
    fn synthetic_extraction_shapes() {
        let ex = FeatureExtractor::mock(spec(6, 0), AudioFrameSpec::default(), 16, 32, 32);
        let utt = Utterance {
            id: "u".into(),
            speaker: "A".into(),
            text: "x".into(),
            audio_ref: Some("synthetic:tone-220-5.0".into()),
            video_ref: Some("synthetic:gray#u".into()),
            label: None,
            index_in_conversation: 0,
        };
        let raw = ex.extract(&utt).unwrap();
        assert_eq!(raw.video.dim(), (6, 32));
        assert_eq!(raw.audio.dim(), (3, 32));
        let bare = Utterance { audio_ref: None, video_ref: None, ..utt };
        let raw = ex.extract(&bare).unwrap();
        assert_eq!((raw.video.nrows(), raw.audio.nrows()), (0, 0));
    }

    proptest! {
        #[test]
        fn frame_sampling_invariants(total in 1usize..500, n in 1usize..100, seed in any::<u64>()) {
            let s = spec(n, seed);
            let a = sample_frame_indices(total, &s).unwrap();
            prop_assert_eq!(&a, &sample_frame_indices(total, &s).unwrap());
            prop_assert_eq!(a.len(), n);
            prop_assert!(a.iter().all(|&i| i < total));
            if total >= n {
                prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            } else {
                prop_assert!(a.windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn audio_windows_tile_the_clip(duration in 0.001f64..120.0, stride in 0.1f64..5.0) {
            let w = segment_audio(duration, &AudioFrameSpec { stride_seconds: stride }).unwrap();
            prop_assert!(!w.is_empty());
            prop_assert_eq!(w[0].0, 0.0);
            prop_assert_eq!(w.last().unwrap().1, duration);
            for pair in w.windows(2) {
                prop_assert_eq!(pair[0].1, pair[1].0);
            }
            prop_assert!(w.iter().all(|&(s, e)| s < e));
        }
    }
}
