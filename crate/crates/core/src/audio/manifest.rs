use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One utterance entry of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub num_samples: usize,
}

/// Utterance records plus the dense speaker → class mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<ManifestRecord>,
    base_dir: PathBuf,
    classes: BTreeMap<String, usize>,
}

impl CorpusManifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Self {
        let mut classes = BTreeMap::new();
        for r in &records {
            classes.entry(r.speaker_id.clone()).or_insert(0);
        }
        for (i, v) in classes.values_mut().enumerate() {
            *v = i;
        }
        Self {
            records,
            base_dir: base_dir.into(),
            classes,
        }
    }

    /// Loads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<ManifestRecord> = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(records, base);
        for r in &m.records {
            let p = m.resolve(r);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry missing"),
                ));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.records)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_of(&self, speaker_id: &str) -> Option<usize> {
        self.classes.get(speaker_id).copied()
    }

    /// Speaker ids ordered by class index.
    pub fn speakers(&self) -> Vec<&str> {
        self.classes.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
