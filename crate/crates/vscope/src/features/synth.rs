//! Synthetic corpus generation.
//!
//! Builds a labeled embedding corpus with known geometry: each viseme class is
//! an isotropic Gaussian around a scaled orthogonal basis direction, so class
//! separation and overlap are controlled exactly per condition and per layer.
//! Useful for calibrating the t-SNE and probe stages against ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{CorpusManifest, ManifestEntry};
use super::{emb1, EmbeddingSequence, FeatureError};
use crate::alignment::{write_alignment_csv, AlignmentSegment, VisemeMap};
use crate::seed::sub_seed;

fn default_layers() -> Vec<u32> {
    vec![0]
}
fn default_frames_per_token() -> usize {
    3
}
fn default_tokens_per_utterance() -> usize {
    14
}
fn default_fps() -> f64 {
    25.0
}

/// One acoustic/visual condition: class means sit at `separation * e_class`
/// (times the layer scale) and frames get isotropic Gaussian noise of
/// `noise_std` per dimension.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthCondition {
    pub name: String,
    pub separation: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    #[serde(default = "default_layers")]
    pub layers: Vec<u32>,
    pub conditions: Vec<SynthCondition>,
    pub tokens_per_class: usize,
    #[serde(default = "default_frames_per_token")]
    pub frames_per_token: usize,
    #[serde(default = "default_tokens_per_utterance")]
    pub tokens_per_utterance: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Optional per-layer multiplier on the separation (parallel to `layers`).
    #[serde(default)]
    pub layer_scales: Vec<f64>,
}

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self, FeatureError> {
        let spec: SynthSpec =
            serde_json::from_str(text).map_err(|e| FeatureError::BadManifest(e.to_string()))?;
        Ok(spec)
    }

    fn layer_scale(&self, layer_idx: usize) -> f64 {
        self.layer_scales.get(layer_idx).copied().unwrap_or(1.0)
    }

    fn validate(&self, n_classes: usize) -> Result<(), FeatureError> {
        let bad = |msg: String| FeatureError::BadManifest(msg);
        if self.dim < n_classes {
            return Err(bad(format!(
                "dim {} is too small for {} classes (means use an orthogonal basis)",
                self.dim, n_classes
            )));
        }
        if self.conditions.is_empty() || self.layers.is_empty() {
            return Err(bad("need at least one condition and one layer".to_string()));
        }
        if self.tokens_per_class == 0 || self.frames_per_token == 0 || self.tokens_per_utterance == 0
        {
            return Err(bad(
                "tokens_per_class, frames_per_token, tokens_per_utterance must be positive"
                    .to_string(),
            ));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(bad(format!("fps {} must be finite and positive", self.fps)));
        }
        if !self.layer_scales.is_empty() && self.layer_scales.len() != self.layers.len() {
            return Err(bad(format!(
                "layer_scales has {} entries for {} layers",
                self.layer_scales.len(),
                self.layers.len()
            )));
        }
        for c in &self.conditions {
            if c.name.is_empty() || c.name.contains([',', '\n', '\r', '/', '\\']) {
                return Err(bad(format!("condition name {:?} is not path/CSV safe", c.name)));
            }
            if !(c.noise_std >= 0.0 && c.separation.is_finite() && c.noise_std.is_finite()) {
                return Err(bad(format!("condition {:?} has bad parameters", c.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub sequences: Vec<EmbeddingSequence>,
    pub segments: Vec<AlignmentSegment>,
}

/// The exact class mean used for `(condition, layer index, class index)`.
pub fn class_mean(spec: &SynthSpec, cond: &SynthCondition, layer_idx: usize, class_idx: usize) -> Vec<f64> {
    let mut mean = vec![0.0; spec.dim];
    mean[class_idx] = cond.separation * spec.layer_scale(layer_idx);
    mean
}

/// Generates frame embeddings and a matching alignment for every class of
/// `map`. Token counts are exact per class; all randomness flows from `seed`.
pub fn generate_synthetic_corpus(
    spec: &SynthSpec,
    map: &VisemeMap,
    seed: u64,
) -> Result<SynthCorpus, FeatureError> {
    let classes = map.visemes();
    spec.validate(classes.len())?;

    // Interleaved token list: class 0, 1, ..., 0, 1, ... keeps per-utterance
    // content mixed while per-class totals stay exact.
    let mut tokens: Vec<(usize, crate::alignment::PhonemeLabel)> = Vec::new();
    for rep in 0..spec.tokens_per_class {
        for (ci, viseme) in classes.iter().enumerate() {
            let phonemes = map.phonemes_of(viseme).expect("class from this map");
            let ph = phonemes[rep % phonemes.len()].clone();
            tokens.push((ci, ph));
        }
    }

    let utterances: Vec<&[(usize, crate::alignment::PhonemeLabel)]> =
        tokens.chunks(spec.tokens_per_utterance).collect();
    let utt_id = |u: usize| format!("utt{u:04}");

    let mut segments = Vec::new();
    for (u, toks) in utterances.iter().enumerate() {
        for (k, (_, ph)) in toks.iter().enumerate() {
            let start = (k * spec.frames_per_token) as f64 / spec.fps;
            let end = ((k + 1) * spec.frames_per_token) as f64 / spec.fps;
            segments.push(AlignmentSegment {
                utterance_id: utt_id(u),
                phoneme: ph.clone(),
                start,
                end,
            });
        }
    }

    let mut sequences = Vec::new();
    for (cond_idx, cond) in spec.conditions.iter().enumerate() {
        for (layer_idx, &layer) in spec.layers.iter().enumerate() {
            let stream = (cond_idx * spec.layers.len() + layer_idx) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "synth", stream));
            let scale = spec.layer_scale(layer_idx);
            for (u, toks) in utterances.iter().enumerate() {
                let t = toks.len() * spec.frames_per_token;
                let mut frames = Array2::<f32>::zeros((t, spec.dim));
                for (k, (ci, _)) in toks.iter().enumerate() {
                    let mean = cond.separation * scale;
                    for f in 0..spec.frames_per_token {
                        let row = k * spec.frames_per_token + f;
                        for d in 0..spec.dim {
                            let noise: f64 = if cond.noise_std > 0.0 {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                cond.noise_std * z
                            } else {
                                0.0
                            };
                            let base = if d == *ci { mean } else { 0.0 };
                            frames[(row, d)] = (base + noise) as f32;
                        }
                    }
                }
                sequences.push(EmbeddingSequence {
                    utterance_id: utt_id(u),
                    condition: cond.name.clone(),
                    layer,
                    fps: spec.fps,
                    frames,
                });
            }
        }
    }

    Ok(SynthCorpus {
        sequences,
        segments,
    })
}

/// Writes a corpus to disk: EMB1 files under `emb/{condition}/layer{L}/`, a
/// `manifest.json`, and an `alignment.csv`. Returns the manifest path.
pub fn write_corpus(corpus: &SynthCorpus, out_dir: &Path) -> Result<PathBuf, FeatureError> {
    let mut entries = Vec::new();
    for seq in &corpus.sequences {
        let rel = format!(
            "emb/{}/layer{}/{}.emb1",
            seq.condition, seq.layer, seq.utterance_id
        );
        let path = out_dir.join(&rel);
        let parent = path.parent().expect("relative path has a parent");
        fs::create_dir_all(parent).map_err(|e| FeatureError::io(parent, e))?;
        let bytes = emb1::write_embedding_container(&seq.frames);
        crate::ioutil::write_atomic(&path, bytes.as_slice()).map_err(|e| FeatureError::io(&path, e))?;
        entries.push(ManifestEntry {
            utterance_id: seq.utterance_id.clone(),
            condition: seq.condition.clone(),
            layer: seq.layer,
            fps: seq.fps,
            path: rel,
            dim: Some(seq.frames.ncols() as u32),
        });
    }
    let manifest = CorpusManifest { entries };
    let manifest_path = out_dir.join("manifest.json");
    crate::ioutil::write_atomic(&manifest_path, manifest.to_json().as_bytes())
        .map_err(|e| FeatureError::io(&manifest_path, e))?;
    let alignment_path = out_dir.join("alignment.csv");
    crate::ioutil::write_atomic(&alignment_path, write_alignment_csv(&corpus.segments).as_bytes())
        .map_err(|e| FeatureError::io(&alignment_path, e))?;
    Ok(manifest_path)
}
