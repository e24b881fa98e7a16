//! Media references: frame directories, WAV files, and `synthetic:` clips.
//!
//! Synthetic refs have the form `synthetic:<pattern>[#clip-id]`. The fragment
//! names a clip without changing its content.
//!
//! | pattern              | media                                     |
//! |----------------------|-------------------------------------------|
//! | `gray`               | 48 mid-gray 32x32 frames                  |
//! | `noise-<seed>`       | 48 frames of seeded noise                 |
//! | `tone-<hz>-<secs>`   | 16 kHz sine                               |
//! | `silence-<secs>`     | 16 kHz silence                            |

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub trait VideoSource {
    fn total_frames(&self) -> usize;
    fn frame(&self, index: usize) -> Result<RgbImage>;
}

#[derive(Debug, Clone)]
pub enum SyntheticVideo {
    Gray { frames: usize },
    Noise { frames: usize, seed: u64 },
}

const SYNTHETIC_FRAMES: usize = 48;
const SYNTHETIC_SIDE: u32 = 32;
const SYNTHETIC_RATE: u32 = 16_000;

impl VideoSource for SyntheticVideo {
    fn total_frames(&self) -> usize {
        match self {
            SyntheticVideo::Gray { frames } | SyntheticVideo::Noise { frames, .. } => *frames,
        }
    }

    fn frame(&self, index: usize) -> Result<RgbImage> {
        if index >= self.total_frames() {
            return Err(Error::Index { index, len: self.total_frames() });
        }
        Ok(match self {
            SyntheticVideo::Gray { .. } => {
                RgbImage::from_pixel(SYNTHETIC_SIDE, SYNTHETIC_SIDE, image::Rgb([128, 128, 128]))
            }
            SyntheticVideo::Noise { seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
                RgbImage::from_fn(SYNTHETIC_SIDE, SYNTHETIC_SIDE, |_, _| {
                    image::Rgb([rng.random(), rng.random(), rng.random()])
                })
            }
        })
    }
}

/// A directory of extracted frames, ordered by file name.
#[derive(Debug, Clone)]
pub struct FrameDirSource {
    files: Vec<PathBuf>,
}

impl FrameDirSource {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::storage(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Input(format!("no frame images in {}", dir.display())));
        }
        Ok(Self { files })
    }
}

impl VideoSource for FrameDirSource {
    fn total_frames(&self) -> usize {
        self.files.len()
    }

    fn frame(&self, index: usize) -> Result<RgbImage> {
        let path = self
            .files
            .get(index)
            .ok_or(Error::Index { index, len: self.files.len() })?;
        image::open(path)
            .map(|img| img.to_rgb8())
            .map_err(|e| Error::Encoding { index, message: format!("{}: {e}", path.display()) })
    }
}

pub(crate) fn resize(frame: &RgbImage, width: u32, height: u32) -> RgbImage {
    if frame.dimensions() == (width, height) {
        frame.clone()
    } else {
        imageops::resize(frame, width, height, FilterType::Triangle)
    }
}

/// Mono PCM samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioClip {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples in `[start, end)` seconds; never empty for a non-empty clip.
    pub fn slice(&self, start: f64, end: f64) -> &[f32] {
        let n = self.samples.len();
        let s = ((start * self.sample_rate as f64).round() as usize).min(n.saturating_sub(1));
        let e = ((end * self.sample_rate as f64).round() as usize).clamp(s + 1, n);
        &self.samples[s..e]
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = hound::WavReader::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .into_samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
            }
        };
        let samples = interleaved
            .chunks(channels)
            .map(|c| c.iter().sum::<f32>() / c.len() as f32)
            .collect();
        Ok(Self { sample_rate: spec.sample_rate, samples })
    }
}

/// Resolves media refs, relative paths against `base_dir`.
#[derive(Debug, Clone, Default)]
pub struct MediaResolver {
    pub base_dir: Option<PathBuf>,
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Input(format!("bad {what} {s:?} in synthetic media ref")))
}

impl MediaResolver {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self { base_dir: Some(base_dir.into()) }
    }

    fn path(&self, r: &str) -> PathBuf {
        let p = PathBuf::from(r);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p,
        }
    }

    pub fn video(&self, r: &str) -> Result<Box<dyn VideoSource>> {
        if let Some(rest) = r.strip_prefix("synthetic:") {
            let pattern = rest.split('#').next().unwrap_or_default();
            return match pattern.split('-').collect::<Vec<_>>().as_slice() {
                ["gray"] => Ok(Box::new(SyntheticVideo::Gray { frames: SYNTHETIC_FRAMES })),
                ["noise", seed] => Ok(Box::new(SyntheticVideo::Noise {
                    frames: SYNTHETIC_FRAMES,
                    seed: parse_num(seed, "seed")?,
                })),
                _ => Err(Error::Input(format!("unknown synthetic video {r:?}"))),
            };
        }
        let path = self.path(r);
        if path.is_dir() {
            Ok(Box::new(FrameDirSource::open(path)?))
        } else {
            Err(Error::Input(format!(
                "video ref {r:?} must be a directory of extracted frames or a synthetic: ref"
            )))
        }
    }

    pub fn audio(&self, r: &str) -> Result<AudioClip> {
        if let Some(rest) = r.strip_prefix("synthetic:") {
            let pattern = rest.split('#').next().unwrap_or_default();
            let (hz, secs) = match pattern.split('-').collect::<Vec<_>>().as_slice() {
                ["tone", hz, secs] => (parse_num::<f64>(hz, "frequency")?, parse_num::<f64>(secs, "duration")?),
                ["silence", secs] => (0.0, parse_num::<f64>(secs, "duration")?),
                _ => return Err(Error::Input(format!("unknown synthetic audio {r:?}"))),
            };
            let n = (secs * SYNTHETIC_RATE as f64).round() as usize;
            if n == 0 {
                return Err(Error::Input(format!("synthetic audio {r:?} is empty")));
            }
            let samples = (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / SYNTHETIC_RATE as f64).sin()) as f32)
                .collect();
            return Ok(AudioClip { sample_rate: SYNTHETIC_RATE, samples });
        }
        AudioClip::read_wav(self.path(r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_refs_ignore_fragment() {
        let m = MediaResolver::default();
        let a = m.video("synthetic:noise-3#a").unwrap().frame(5).unwrap();
        let b = m.video("synthetic:noise-3#b").unwrap().frame(5).unwrap();
        assert_eq!(a, b);
        let clip = m.audio("synthetic:tone-440-2.5#x").unwrap();
        assert_eq!(clip.duration_seconds(), 2.5);
        assert!(m.audio("synthetic:tone-440").is_err());
        assert!(m.video("clip.mp4").is_err());
    }

    #[test]
    fn wav_and_frame_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&wav, spec).unwrap();
        for i in 0..12000 {
            w.write_sample(((i % 100) as i16 - 50) * 100).unwrap();
        }
        w.finalize().unwrap();
        let m = MediaResolver::new(dir.path());
        let clip = m.audio("a.wav").unwrap();
        assert_eq!(clip.duration_seconds(), 1.5);

        let frames = dir.path().join("frames");
        fs::create_dir(&frames).unwrap();
        for i in 0..3 {
            RgbImage::from_pixel(4, 4, image::Rgb([i * 50, 0, 0])).save(frames.join(format!("{i:03}.png"))).unwrap();
        }
        let v = m.video("frames").unwrap();
        assert_eq!(v.total_frames(), 3);
        assert_eq!(v.frame(2).unwrap().get_pixel(0, 0)[0], 100);
    }
}
