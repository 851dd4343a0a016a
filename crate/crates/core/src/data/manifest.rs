//! Dataset manifests and loading.
//!
//! A manifest is a JSON document listing one `MMEB` file per utterance.
//! Relative file paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::{read_record, Label, UtteranceRecord};
use crate::error::{Error, FormatError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: PathBuf,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub d_t: usize,
    pub d_a: usize,
    /// Number of encoder layers summed into each frame, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_sum_count: Option<u32>,
    pub utterances: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Version, dimensions and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.d_t == 0 || self.d_a == 0 {
            return Err(Error::Data("manifest dimensions must be positive".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.utterances {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate utterance id {:?}", e.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

impl Dataset {
    pub fn d_t(&self) -> usize {
        self.manifest.d_t
    }

    pub fn d_a(&self) -> usize {
        self.manifest.d_a
    }

    pub fn split(&self, split: Split) -> &[UtteranceRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn check_dims(rec: &UtteranceRecord, m: &Manifest) -> std::result::Result<(), FormatError> {
    let as_u32 = |n: usize| u32::try_from(n).unwrap_or(u32::MAX);
    if rec.d_t() != m.d_t {
        return Err(FormatError::DimMismatch {
            what: "d_t",
            expected: as_u32(m.d_t),
            found: as_u32(rec.d_t()),
        });
    }
    if let Some(d_a) = rec.d_a() {
        if d_a != m.d_a {
            return Err(FormatError::DimMismatch {
                what: "d_a",
                expected: as_u32(m.d_a),
                found: as_u32(d_a),
            });
        }
    }
    Ok(())
}

/// Loads every record listed in the manifest, grouped by split.
///
/// Training records must carry a class label and at least one chunk.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in &manifest.utterances {
        let path = base.join(&entry.file);
        let mut rec = read_record(&path)?;
        check_dims(&rec, &manifest).map_err(|e| Error::format(&path, e))?;
        if rec.label != entry.label {
            return Err(Error::Data(format!(
                "{}: file label {:?} disagrees with manifest label {:?}",
                path.display(),
                rec.label,
                entry.label
            )));
        }
        rec.id = entry.id.clone();
        match entry.split {
            Split::Train => {
                if rec.chunks.is_empty() {
                    return Err(Error::Data(format!(
                        "training utterance {:?} has no audio chunks",
                        entry.id
                    )));
                }
                train.push(rec);
            }
            Split::Test => test.push(rec),
        }
    }
    if test.is_empty() {
        log::warn!("{}: test split is empty", manifest_path.display());
    }
    debug_assert_eq!(train.len() + test.len(), manifest.utterances.len());
    Ok(Dataset {
        manifest,
        train,
        test,
    })
}
