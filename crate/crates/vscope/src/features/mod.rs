//! Viseme-level feature generation from frame-aligned embeddings.
//!
//! A [`FeatureRecord`] is one viseme token: the frames covered by an aligned
//! phoneme segment, with the first and last third of them discarded and the
//! middle third mean-pooled into a single vector. Datasets are assembled per
//! (condition, layer) from an embedding corpus plus an alignment, and can be
//! cached as CSV, class-balanced by seeded subsampling, or generated
//! synthetically (see [`synth`]).

pub mod emb1;
pub mod manifest;
pub mod synth;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::alignment::{AlignmentError, AlignmentSegment, PhonemeLabel, VisemeLabel, VisemeMap};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("bad container magic or truncated header")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("embedding width mismatch: manifest declares {expected}, container has {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("container payload truncated: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("non-finite embedding value at frame {row}, dim {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("segment [{start}, {end}) covers no frame center at {fps} fps")]
    EmptyCoverage { start: f64, end: f64, fps: f64 },
    #[error("no embedding sequence for utterance {utterance:?} (condition {condition:?}, layer {layer})")]
    MissingUtterance {
        utterance: String,
        condition: String,
        layer: u32,
    },
    #[error("embedding dim mismatch across corpus: {expected} vs {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("mean pool over an empty frame range")]
    EmptyPool,
    #[error("frame range {lo}..{hi} out of bounds for {frames} frames")]
    FrameRangeOutOfBounds { lo: usize, hi: usize, frames: usize },
    #[error("bad feature cache at line {line}: {reason}")]
    BadCache { line: usize, reason: String },
    #[error("bad corpus manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FeatureError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FeatureError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Frame embeddings for one (utterance, condition, layer): a T×D matrix at a
/// fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub utterance_id: String,
    pub condition: String,
    pub layer: u32,
    pub fps: f64,
    pub frames: Array2<f32>,
}

/// One pooled viseme token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub utterance_id: String,
    pub condition: String,
    pub layer: u32,
    pub viseme: VisemeLabel,
    pub phoneme: PhonemeLabel,
    /// Inclusive frame span that was pooled (after trimming).
    pub first_frame: usize,
    pub last_frame: usize,
    pub vector: Vec<f64>,
}

/// An ordered set of feature records. Records are kept in a deterministic
/// order: (condition, layer, utterance_id, segment start).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureDataset {
    pub records: Vec<FeatureRecord>,
    /// Segments dropped because they covered no frame center.
    pub skipped_segments: usize,
}

impl FeatureDataset {
    pub fn new(records: Vec<FeatureRecord>, skipped_segments: usize) -> Self {
        FeatureDataset {
            records,
            skipped_segments,
        }
    }

    /// Per-viseme record tallies; consistent with `records` by construction.
    pub fn class_counts(&self) -> BTreeMap<VisemeLabel, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.viseme.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Embedding width, if the dataset is non-empty.
    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.vector.len())
    }

    /// Records restricted to one (condition, layer) slice, order preserved.
    pub fn filter(&self, condition: &str, layer: u32) -> FeatureDataset {
        let records = self
            .records
            .iter()
            .filter(|r| r.condition == condition && r.layer == layer)
            .cloned()
            .collect();
        FeatureDataset::new(records, 0)
    }

    pub fn conditions(&self) -> Vec<String> {
        let mut v: Vec<String> = self.records.iter().map(|r| r.condition.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn layers(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.records.iter().map(|r| r.layer).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Frames whose centers fall inside `[start, end)`: frame `f` covers time
/// `(f + 0.5) / fps`. Returns the contiguous index range, clamped to
/// `0..n_frames`.
pub fn segment_to_frames(
    start: f64,
    end: f64,
    fps: f64,
    n_frames: usize,
) -> Result<Range<usize>, FeatureError> {
    let center = |f: i64| (f as f64 + 0.5) / fps;
    let empty = || FeatureError::EmptyCoverage { start, end, fps };

    // Guess from the closed form, then settle with the predicate itself so the
    // result matches brute-force enumeration even when the guess rounds off.
    let mut first = (start * fps - 0.5).ceil() as i64;
    while first > 0 && center(first - 1) >= start {
        first -= 1;
    }
    while center(first) < start {
        first += 1;
    }
    let mut last = (end * fps - 0.5).floor() as i64;
    while center(last) >= end {
        last -= 1;
    }
    while center(last + 1) < end {
        last += 1;
    }

    let first = first.max(0);
    let last = last.min(n_frames as i64 - 1);
    if first > last {
        return Err(empty());
    }
    Ok(first as usize..(last + 1) as usize)
}

/// Drops the first and last `⌊n/3⌋` entries of a frame range, keeping the
/// middle. Always non-empty for non-empty input.
pub fn trim_middle_third(frames: Range<usize>) -> Range<usize> {
    let n = frames.len();
    let k = n / 3;
    (frames.start + k)..(frames.end - k)
}

/// Column means of `frames[range]`, accumulated in f64.
pub fn mean_pool(frames: &Array2<f32>, range: Range<usize>) -> Result<Vec<f64>, FeatureError> {
    if range.is_empty() {
        return Err(FeatureError::EmptyPool);
    }
    if range.end > frames.nrows() {
        return Err(FeatureError::FrameRangeOutOfBounds {
            lo: range.start,
            hi: range.end,
            frames: frames.nrows(),
        });
    }
    let d = frames.ncols();
    let mut acc = vec![0.0f64; d];
    for f in range.clone() {
        let row = frames.row(f);
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a += f64::from(v);
        }
    }
    let n = range.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// Assembles one record per (segment, condition, layer) present in `sequences`.
///
/// The (condition, layer) grid is taken from the sequences themselves; every
/// utterance appearing in `segments` must have a sequence for each grid cell.
/// Segments that cover no frame center are skipped and counted, not fatal.
/// Records come out sorted by (condition, layer, utterance_id, start).
pub fn build_dataset(
    sequences: &[EmbeddingSequence],
    segments: &[AlignmentSegment],
    map: &VisemeMap,
) -> Result<FeatureDataset, FeatureError> {
    let mut dim: Option<usize> = None;
    let mut index: BTreeMap<(&str, u32, &str), &EmbeddingSequence> = BTreeMap::new();
    for seq in sequences {
        match dim {
            None => dim = Some(seq.frames.ncols()),
            Some(d) if d != seq.frames.ncols() => {
                return Err(FeatureError::DimMismatch {
                    expected: d,
                    got: seq.frames.ncols(),
                })
            }
            _ => {}
        }
        index.insert(
            (seq.condition.as_str(), seq.layer, seq.utterance_id.as_str()),
            seq,
        );
    }

    let mut grid: Vec<(String, u32)> = index
        .keys()
        .map(|(c, l, _)| (c.to_string(), *l))
        .collect();
    grid.dedup();

    let mut by_utt: BTreeMap<&str, Vec<&AlignmentSegment>> = BTreeMap::new();
    for seg in segments {
        by_utt.entry(seg.utterance_id.as_str()).or_default().push(seg);
    }

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (condition, layer) in &grid {
        for (utt, segs) in &by_utt {
            let seq = index
                .get(&(condition.as_str(), *layer, utt))
                .ok_or_else(|| FeatureError::MissingUtterance {
                    utterance: utt.to_string(),
                    condition: condition.clone(),
                    layer: *layer,
                })?;
            for seg in segs {
                let covered =
                    match segment_to_frames(seg.start, seg.end, seq.fps, seq.frames.nrows()) {
                        Ok(r) => r,
                        Err(FeatureError::EmptyCoverage { .. }) => {
                            skipped += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                let kept = trim_middle_third(covered);
                let vector = mean_pool(&seq.frames, kept.clone())?;
                let viseme = map.map_to_viseme(&seg.phoneme)?;
                records.push(FeatureRecord {
                    utterance_id: utt.to_string(),
                    condition: condition.clone(),
                    layer: *layer,
                    viseme,
                    phoneme: seg.phoneme.clone(),
                    first_frame: kept.start,
                    last_frame: kept.end - 1,
                    vector,
                });
            }
        }
    }
    Ok(FeatureDataset::new(records, skipped))
}

/// Caps every class at `per_class` records by seeded sampling without
/// replacement; classes at or under the cap are kept whole. Record order is
/// preserved. Same seed, same subsample.
pub fn balanced_subsample(ds: &FeatureDataset, per_class: usize, seed: u64) -> FeatureDataset {
    let mut by_class: BTreeMap<&VisemeLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        by_class.entry(&r.viseme).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::new();
    for (_, mut idxs) in by_class {
        if idxs.len() > per_class {
            // Partial Fisher-Yates: the first per_class slots are the sample.
            for i in 0..per_class {
                let j = rng.random_range(i..idxs.len());
                idxs.swap(i, j);
            }
            idxs.truncate(per_class);
        }
        selected.extend(idxs);
    }
    selected.sort_unstable();
    let records = selected.iter().map(|&i| ds.records[i].clone()).collect();
    FeatureDataset::new(records, 0)
}

/// Fixed lead of the feature cache header; vector columns `v0..v{D-1}` follow.
const CACHE_LEAD: &str = "utterance_id,condition,layer,viseme,phoneme,first_frame,last_frame";

/// Serializes a dataset to the feature cache CSV. Floats use the shortest
/// round-trip representation, so write → read is an identity.
pub fn write_feature_csv(ds: &FeatureDataset) -> String {
    let dim = ds.dim().unwrap_or(0);
    let mut out = String::new();
    out.push_str(CACHE_LEAD);
    for i in 0..dim {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for r in &ds.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            r.utterance_id, r.condition, r.layer, r.viseme, r.phoneme, r.first_frame, r.last_frame
        ));
        for v in &r.vector {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Parses a feature cache CSV produced by [`write_feature_csv`].
pub fn read_feature_csv(text: &str) -> Result<FeatureDataset, FeatureError> {
    let bad = |line: usize, reason: String| FeatureError::BadCache { line, reason };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(1, "empty file".to_string()))?;
    let header = header.trim_end();
    if header != CACHE_LEAD && !header.starts_with(&format!("{CACHE_LEAD},v0")) {
        return Err(bad(1, format!("unexpected header {header:?}")));
    }
    let dim = header.split(',').count() - 7;
    for (i, name) in header.split(',').skip(7).enumerate() {
        if name != format!("v{i}") {
            return Err(bad(1, format!("unexpected vector column {name:?}")));
        }
    }

    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 + dim {
            return Err(bad(
                line_no,
                format!("expected {} fields, got {}", 7 + dim, fields.len()),
            ));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(line_no, format!("bad {what} {s:?}")))
        };
        let mut vector = Vec::with_capacity(dim);
        for s in &fields[7..] {
            let v: f64 = s
                .parse()
                .map_err(|_| bad(line_no, format!("bad vector value {s:?}")))?;
            if !v.is_finite() {
                return Err(bad(line_no, format!("non-finite vector value {s:?}")));
            }
            vector.push(v);
        }
        records.push(FeatureRecord {
            utterance_id: fields[0].to_string(),
            condition: fields[1].to_string(),
            layer: fields[2]
                .parse()
                .map_err(|_| bad(line_no, format!("bad layer {:?}", fields[2])))?,
            viseme: VisemeLabel::new(fields[3])
                .map_err(|e| bad(line_no, format!("bad viseme: {e}")))?,
            phoneme: PhonemeLabel::new(fields[4])
                .map_err(|e| bad(line_no, format!("bad phoneme: {e}")))?,
            first_frame: parse_usize(fields[5], "first_frame")?,
            last_frame: parse_usize(fields[6], "last_frame")?,
            vector,
        });
    }
    Ok(FeatureDataset::new(records, 0))
}
