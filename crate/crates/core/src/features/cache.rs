use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{FeatureExtractor, RawFeatures};
use crate::corpus::Utterance;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MFT1";

/// On-disk cache of encoder outputs, one file per `(utterance, spec hash)`.
/// The extractor spec is written next to the arrays as `<hash>.spec.json`.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_matrix(out: &mut Vec<u8>, m: &Array2<f64>) {
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_matrix(bytes: &[u8], pos: &mut usize) -> Option<Array2<f64>> {
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = bytes.get(*pos..*pos + n)?;
        *pos += n;
        Some(s)
    };
    let rows = u64::from_le_bytes(take(8)?.try_into().ok()?) as usize;
    let cols = u64::from_le_bytes(take(8)?.try_into().ok()?) as usize;
    let data = take(rows.checked_mul(cols)?.checked_mul(8)?)?;
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values).ok()
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn file_for(&self, utterance_id: &str, spec_hash: &str) -> PathBuf {
        self.dir.join(format!("{}-{spec_hash}.bin", file_safe(utterance_id)))
    }

    pub fn get(&self, utterance_id: &str, spec_hash: &str) -> Result<Option<RawFeatures>> {
        let path = self.file_for(utterance_id, spec_hash);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::storage(&path, e)),
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(Error::Input(format!("{} is not a feature file", path.display())));
        }
        let mut pos = 4;
        let video = read_matrix(&bytes, &mut pos);
        let audio = read_matrix(&bytes, &mut pos);
        match (video, audio) {
            (Some(video), Some(audio)) if pos == bytes.len() => Ok(Some(RawFeatures { video, audio })),
            _ => Err(Error::Input(format!("{} is truncated or corrupt", path.display()))),
        }
    }

    pub fn put(&self, utterance_id: &str, spec_hash: &str, features: &RawFeatures) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::storage(&self.dir, e))?;
        let mut bytes = MAGIC.to_vec();
        write_matrix(&mut bytes, &features.video);
        write_matrix(&mut bytes, &features.audio);
        let path = self.file_for(utterance_id, spec_hash);
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::storage(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::storage(&path, e))
    }

    /// Cached features for `utt`, extracting and storing them on a miss.
    pub fn get_or_extract(&self, extractor: &FeatureExtractor, utt: &Utterance) -> Result<RawFeatures> {
        let hash = extractor.spec_hash();
        if let Some(hit) = self.get(&utt.id, &hash)? {
            return Ok(hit);
        }
        let spec_path = self.dir.join(format!("{hash}.spec.json"));
        if !spec_path.exists() {
            fs::create_dir_all(&self.dir).map_err(|e| Error::storage(&self.dir, e))?;
            fs::write(&spec_path, serde_json::to_string_pretty(&extractor.spec_json())?)
                .map_err(|e| Error::storage(&spec_path, e))?;
        }
        let features = extractor.extract(utt)?;
        self.put(&utt.id, &hash, &features)?;
        Ok(features)
    }
}
