//! JSON-lines image manifests.
//!
//! One object per line: `{"id", "path", "location", "frame"?, "positive"?}`.
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::io::fmap::read_feature_map;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(deserialize_with = "label_from_any")]
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<i64>,
    /// Pins the matched image used when this entry is a training query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
}

fn label_from_any<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<String, D::Error> {
    match serde_json::Value::deserialize(de)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "location must be a string or number, got {other}"
        ))),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.check_unique_ids()?;
        Ok(m)
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::dataset(format!("manifest line {}: {e}", lineno + 1))
            })?;
            entries.push(entry);
        }
        Self::new(entries, base_dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Copy with every path made absolute (or base-relative when the base
    /// itself is relative), suitable for writing elsewhere.
    pub fn rebased(&self) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    path: self.resolve(e),
                    ..e.clone()
                })
                .collect(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn load_features(&self) -> Result<Vec<FeatureMap>> {
        self.entries
            .iter()
            .map(|e| read_feature_map(self.resolve(e)))
            .collect()
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::dataset(format!("duplicate image id {:?}", e.id)));
            }
        }
        Ok(())
    }
}

/// In-memory training set: manifest metadata plus loaded feature maps.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub locations: Vec<String>,
    pub frames: Vec<Option<i64>>,
    /// Pinned positive per entry, as an index.
    pub positives: Vec<Option<usize>>,
    pub features: Vec<FeatureMap>,
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let features = manifest.load_features()?;
        Self::from_parts(&manifest.entries, features)
    }

    pub fn from_parts(entries: &[ManifestEntry], features: Vec<FeatureMap>) -> Result<Self> {
        if entries.len() != features.len() {
            return Err(Error::dataset("entry and feature counts differ"));
        }
        let index: BTreeMap<&str, usize> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect();
        if index.len() != entries.len() {
            return Err(Error::dataset("duplicate image ids"));
        }
        let positives = entries
            .iter()
            .map(|e| {
                e.positive
                    .as_deref()
                    .map(|p| {
                        index.get(p).copied().ok_or_else(|| {
                            Error::dataset(format!("{}: unknown positive {p:?}", e.id))
                        })
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            ids: entries.iter().map(|e| e.id.clone()).collect(),
            locations: entries.iter().map(|e| e.location.clone()).collect(),
            frames: entries.iter().map(|e| e.frame).collect(),
            positives,
            features,
        };
        for (i, p) in ds.positives.iter().enumerate() {
            if let Some(p) = *p {
                if p == i || ds.locations[p] != ds.locations[i] {
                    return Err(Error::dataset(format!(
                        "{}: pinned positive must be another image of the same location",
                        ds.ids[i]
                    )));
                }
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.features.first().map(FeatureMap::channels)
    }

    pub fn location_count(&self) -> usize {
        self.locations.iter().collect::<HashSet<_>>().len()
    }

    /// Indices of images sharing `i`'s location, excluding `i`.
    pub fn same_location(&self, i: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| j != i && self.locations[j] == self.locations[i])
            .collect()
    }

    /// Every image that can act as a query: it has a pinned positive or at
    /// least one other image at its location.
    pub fn query_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.positives[i].is_some() || !self.same_location(i).is_empty())
            .collect()
    }

    pub fn validate_for_training(&self) -> Result<()> {
        if self.location_count() < 2 {
            return Err(Error::dataset(
                "training needs at least two distinct locations",
            ));
        }
        let c = self.channels().unwrap_or(0);
        if self.features.iter().any(|f| f.channels() != c) {
            return Err(Error::dataset("feature maps disagree on channel count"));
        }
        if self.query_indices().is_empty() {
            return Err(Error::dataset("no location has two or more images"));
        }
        Ok(())
    }
}
