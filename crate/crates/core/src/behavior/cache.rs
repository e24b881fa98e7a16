use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{BehaviorAnnotation, BehaviorError};
use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};

/// An utterance whose behavior could not be generated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub utterance_id: String,
    pub source_model: String,
    pub error: String,
    pub attempts: u32,
    pub raw_response: Option<String>,
    pub created_at: DateTime<Utc>,
}

impl FailureRecord {
    pub fn from_error(utterance_id: &str, source_model: &str, err: &BehaviorError) -> Self {
        let (attempts, raw_response) = match err {
            BehaviorError::Transport { attempts, .. } => (*attempts, None),
            BehaviorError::Unparseable { attempts, raw, .. } => (*attempts, Some(raw.clone())),
            _ => (0, None),
        };
        Self {
            utterance_id: utterance_id.to_string(),
            source_model: source_model.to_string(),
            error: err.to_string(),
            attempts,
            raw_response,
            created_at: Utc::now(),
        }
    }
}

type Key = (String, String);

#[derive(Default)]
struct Inner {
    records: Vec<BehaviorAnnotation>,
    by_key: HashMap<Key, usize>,
    latest: HashMap<String, usize>,
    failures: HashMap<Key, FailureRecord>,
}

impl Inner {
    fn insert(&mut self, ann: BehaviorAnnotation) {
        let idx = self.records.len();
        self.by_key
            .insert((ann.utterance_id.clone(), ann.source_model.clone()), idx);
        self.latest.insert(ann.utterance_id.clone(), idx);
        self.records.push(ann);
    }
}

/// Append-only JSONL store of behavior annotations keyed by
/// `(utterance_id, source_model)`, with a sibling failure log.
/// Writes are serialized through an internal lock.
pub struct BehaviorCache {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl BehaviorCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(Inner::default()),
        }
    }

    /// Opens (or starts) the cache at `path`, replaying existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut inner = Inner::default();
        for ann in read_jsonl::<BehaviorAnnotation>(&path)? {
            inner.insert(ann);
        }
        for f in read_jsonl::<FailureRecord>(&failures_path(&path))? {
            let key = (f.utterance_id.clone(), f.source_model.clone());
            let superseded = inner
                .by_key
                .get(&key)
                .is_some_and(|&i| inner.records[i].created_at >= f.created_at);
            if !superseded {
                inner.failures.insert(key, f);
            }
        }
        Ok(Self {
            path: Some(path),
            inner: Mutex::new(inner),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Stores `ann`. Returns false when an identical record is already the
    /// latest for its key.
    pub fn put(&self, ann: &BehaviorAnnotation) -> Result<bool> {
        let mut inner = self.inner.lock().unwrap();
        let key = (ann.utterance_id.clone(), ann.source_model.clone());
        if inner.by_key.get(&key).is_some_and(|&i| inner.records[i] == *ann) {
            return Ok(false);
        }
        if let Some(path) = &self.path {
            append_line(path, ann)?;
        }
        inner.failures.remove(&key);
        inner.insert(ann.clone());
        Ok(true)
    }

    pub fn put_failure(&self, failure: &FailureRecord) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(path) = &self.path {
            append_line(&failures_path(path), failure)?;
        }
        inner.failures.insert(
            (failure.utterance_id.clone(), failure.source_model.clone()),
            failure.clone(),
        );
        Ok(())
    }

    /// Latest annotation for the utterance from any model.
    pub fn get(&self, utterance_id: &str) -> Option<BehaviorAnnotation> {
        let inner = self.inner.lock().unwrap();
        inner.latest.get(utterance_id).map(|&i| inner.records[i].clone())
    }

    pub fn get_for(&self, utterance_id: &str, source_model: &str) -> Option<BehaviorAnnotation> {
        let inner = self.inner.lock().unwrap();
        inner
            .by_key
            .get(&(utterance_id.to_string(), source_model.to_string()))
            .map(|&i| inner.records[i].clone())
    }

    pub fn failure_for(&self, utterance_id: &str, source_model: &str) -> Option<FailureRecord> {
        self.inner
            .lock()
            .unwrap()
            .failures
            .get(&(utterance_id.to_string(), source_model.to_string()))
            .cloned()
    }

    pub fn has_failure(&self, utterance_id: &str) -> bool {
        self.inner
            .lock()
            .unwrap()
            .failures
            .keys()
            .any(|(id, _)| id == utterance_id)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Utterances in `manifest` with neither an annotation nor a failure record.
    pub fn unaccounted(&self, manifest: &CorpusManifest) -> Vec<String> {
        manifest
            .utterances()
            .map(|r| &r.utterance.id)
            .filter(|id| self.get(id).is_none() && !self.has_failure(id))
            .cloned()
            .collect()
    }
}

fn failures_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "behaviors".into());
    path.with_file_name(format!("{stem}.failures.jsonl"))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::storage(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::storage(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::storage(parent, e))?;
    }
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| Error::storage(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: &str, model: &str, facial: &str) -> BehaviorAnnotation {
        BehaviorAnnotation {
            utterance_id: id.into(),
            source_model: model.into(),
            facial_expression: facial.into(),
            body_language: "arms \"crossed\", très tight".into(),
            posture: "slumped\tlow".into(),
            raw_response: "raw\nresponse ✓".into(),
            created_at: Utc::now(),
        }
    }

    #[test]
    fn empty_cache_returns_nothing() {
        assert!(BehaviorCache::in_memory().get("u").is_none());
    }

    #[test]
    fn put_get_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/behaviors.jsonl");
        let a = ann("u1", "m", "smile");
        {
            let cache = BehaviorCache::open(&path).unwrap();
            assert!(cache.put(&a).unwrap());
            assert!(!cache.put(&a).unwrap());
            assert_eq!(cache.get("u1").unwrap(), a);
        }
        let reopened = BehaviorCache::open(&path).unwrap();
        assert_eq!(reopened.get("u1").unwrap(), a);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
    }

    #[test]
    fn keyed_by_utterance_and_model() {
        let cache = BehaviorCache::in_memory();
        let a = ann("u1", "big", "smile");
        let b = ann("u1", "other", "frown");
        cache.put(&a).unwrap();
        cache.put(&b).unwrap();
        assert_eq!(cache.get_for("u1", "big").unwrap(), a);
        assert_eq!(cache.get_for("u1", "other").unwrap(), b);
        assert_eq!(cache.get("u1").unwrap(), b);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn failures_persist_and_clear_on_success() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.jsonl");
        let cache = BehaviorCache::open(&path).unwrap();
        let err = BehaviorError::Unparseable { attempts: 4, reason: "x".into(), raw: "junk".into() };
        cache.put_failure(&FailureRecord::from_error("u1", "m", &err)).unwrap();
        assert!(dir.path().join("b.failures.jsonl").exists());
        let reopened = BehaviorCache::open(&path).unwrap();
        assert_eq!(reopened.failure_for("u1", "m").unwrap().attempts, 4);
        reopened.put(&ann("u1", "m", "smile")).unwrap();
        assert!(reopened.failure_for("u1", "m").is_none());
        assert!(BehaviorCache::open(&path).unwrap().failure_for("u1", "m").is_none());
    }
}
