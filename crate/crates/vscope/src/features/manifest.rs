//! Corpus manifest: JSON listing of EMB1 files with their metadata.
//!
//! Each entry binds one container file to an (utterance, condition, layer)
//! cell; paths are resolved relative to the manifest's own directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{emb1, EmbeddingSequence, FeatureError};

fn default_fps() -> f64 {
    25.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub condition: String,
    pub layer: u32,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub path: String,
    /// Declared embedding width; checked against the container header when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn parse(text: &str) -> Result<Self, FeatureError> {
        let manifest: CorpusManifest =
            serde_json::from_str(text).map_err(|e| FeatureError::BadManifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = fs::read_to_string(path).map_err(|e| FeatureError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    fn validate(&self) -> Result<(), FeatureError> {
        let mut keys = BTreeSet::new();
        for e in &self.entries {
            for (what, s) in [("utterance_id", &e.utterance_id), ("condition", &e.condition)] {
                if s.is_empty() || s.contains([',', '\n', '\r']) {
                    return Err(FeatureError::BadManifest(format!(
                        "{what} {s:?} must be non-empty and free of commas/newlines"
                    )));
                }
            }
            if !(e.fps.is_finite() && e.fps > 0.0) {
                return Err(FeatureError::BadManifest(format!(
                    "fps {} for {:?} must be finite and positive",
                    e.fps, e.utterance_id
                )));
            }
            if !keys.insert((e.utterance_id.clone(), e.condition.clone(), e.layer)) {
                return Err(FeatureError::BadManifest(format!(
                    "duplicate entry for ({:?}, {:?}, layer {})",
                    e.utterance_id, e.condition, e.layer
                )));
            }
        }
        Ok(())
    }

    /// Distinct conditions, sorted.
    pub fn conditions(&self) -> Vec<String> {
        let mut v: Vec<String> = self.entries.iter().map(|e| e.condition.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Distinct layers, sorted.
    pub fn layers(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.entries.iter().map(|e| e.layer).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Reads every entry matching the requested conditions and layers into memory.
/// Empty filters mean "all".
pub fn load_corpus(
    manifest_path: &Path,
    conditions: &[String],
    layers: &[u32],
) -> Result<Vec<EmbeddingSequence>, FeatureError> {
    let manifest = CorpusManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    load_corpus_entries(&manifest, base, conditions, layers)
}

pub fn load_corpus_entries(
    manifest: &CorpusManifest,
    base: &Path,
    conditions: &[String],
    layers: &[u32],
) -> Result<Vec<EmbeddingSequence>, FeatureError> {
    let mut sequences = Vec::new();
    for entry in &manifest.entries {
        if !conditions.is_empty() && !conditions.contains(&entry.condition) {
            continue;
        }
        if !layers.is_empty() && !layers.contains(&entry.layer) {
            continue;
        }
        let path: PathBuf = base.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| FeatureError::io(&path, e))?;
        let frames = emb1::read_embedding_container(&bytes, entry.dim)?;
        sequences.push(EmbeddingSequence {
            utterance_id: entry.utterance_id.clone(),
            condition: entry.condition.clone(),
            layer: entry.layer,
            fps: entry.fps,
            frames,
        });
    }
    Ok(sequences)
}
