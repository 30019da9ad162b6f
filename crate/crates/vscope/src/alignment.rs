//! Phoneme labels, viseme taxonomies, and frame-level alignment parsing.
//!
//! The toolkit consumes forced alignments as CSV (`utterance_id,phoneme,start_s,end_s`)
//! and collapses phonemes onto viseme classes through a [`VisemeMap`]. The built-in
//! taxonomy ([`lee_map`]) partitions the 39 ARPAbet phonemes plus silence into 14
//! visually contrastive classes; alternative taxonomies can be loaded from a plain
//! text map file (one `VISEME: ph1 ph2 ...` line per class).

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("empty phoneme label")]
    EmptyLabel,
    #[error("phoneme label {0:?} contains characters outside [a-z]")]
    UnknownCharacters(String),
    #[error("phoneme label {0:?} is longer than 3 characters")]
    LabelTooLong(String),
    #[error("phoneme {0:?} is not covered by viseme map {1:?}")]
    UnmappedPhoneme(String, String),
    #[error("malformed alignment row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("utterance {utterance:?}: segments [{a_start}, {a_end}) and [{b_start}, {b_end}) overlap")]
    OverlappingSegments {
        utterance: String,
        a_start: f64,
        a_end: f64,
        b_start: f64,
        b_end: f64,
    },
    #[error("non-monotone segment times at line {line}: start {start} must be < end {end}")]
    NonMonotoneTimes { line: usize, start: f64, end: f64 },
    #[error("malformed viseme map at line {line}: {reason}")]
    MalformedMapLine { line: usize, reason: String },
    #[error("viseme map {0:?} is empty")]
    EmptyMap(String),
}

/// A normalized phoneme symbol: 1-3 lowercase ASCII letters (`sil` covers silence).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhonemeLabel(String);

impl PhonemeLabel {
    /// Validates an already-normalized symbol. Most callers want [`normalize_phoneme`].
    pub fn new(s: &str) -> Result<Self, AlignmentError> {
        if s.is_empty() {
            return Err(AlignmentError::EmptyLabel);
        }
        if !s.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(AlignmentError::UnknownCharacters(s.to_string()));
        }
        if s.len() > 3 {
            return Err(AlignmentError::LabelTooLong(s.to_string()));
        }
        Ok(PhonemeLabel(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PhonemeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A viseme class name, e.g. `F` or `sil`. Names are non-empty and contain no
/// whitespace, `:`, or `,` so they survive the map-file and CSV formats verbatim.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VisemeLabel(String);

impl VisemeLabel {
    pub fn new(s: &str) -> Result<Self, AlignmentError> {
        if s.is_empty() {
            return Err(AlignmentError::EmptyLabel);
        }
        if s.contains([':', ',']) || s.chars().any(char::is_whitespace) {
            return Err(AlignmentError::UnknownCharacters(s.to_string()));
        }
        Ok(VisemeLabel(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VisemeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Normalizes a raw phoneme token: trims whitespace and surrounding slashes,
/// lowercases, and strips trailing stress digits (`0`/`1`/`2`).
///
/// `"AH0"` → `ah`, `"/ZH/"` → `zh`, `"sil"` → `sil`.
pub fn normalize_phoneme(raw: &str) -> Result<PhonemeLabel, AlignmentError> {
    let mut s = raw.trim();
    s = s.trim_matches('/').trim();
    let mut lower = s.to_ascii_lowercase();
    while lower.ends_with(['0', '1', '2']) {
        lower.pop();
    }
    if lower.is_empty() {
        return Err(AlignmentError::EmptyLabel);
    }
    if !lower.bytes().all(|b| b.is_ascii_lowercase()) {
        return Err(AlignmentError::UnknownCharacters(raw.trim().to_string()));
    }
    PhonemeLabel::new(&lower)
}

/// A many-to-one phoneme → viseme taxonomy with a stable class order.
#[derive(Debug, Clone, PartialEq)]
pub struct VisemeMap {
    name: String,
    /// Viseme classes in declaration order, each with its phonemes in declaration order.
    classes: Vec<(VisemeLabel, Vec<PhonemeLabel>)>,
    lookup: BTreeMap<PhonemeLabel, usize>,
}

impl VisemeMap {
    /// Builds a map from `(viseme, phonemes)` groups. When a phoneme appears more
    /// than once, the first occurrence wins and later ones are dropped.
    pub fn from_groups<I, P>(name: &str, groups: I) -> Result<Self, AlignmentError>
    where
        I: IntoIterator<Item = (VisemeLabel, P)>,
        P: IntoIterator<Item = PhonemeLabel>,
    {
        let mut classes: Vec<(VisemeLabel, Vec<PhonemeLabel>)> = Vec::new();
        let mut lookup = BTreeMap::new();
        for (viseme, phonemes) in groups {
            let class_idx = match classes.iter().position(|(v, _)| *v == viseme) {
                Some(i) => i,
                None => {
                    classes.push((viseme, Vec::new()));
                    classes.len() - 1
                }
            };
            for ph in phonemes {
                if !lookup.contains_key(&ph) {
                    lookup.insert(ph.clone(), class_idx);
                    classes[class_idx].1.push(ph);
                }
            }
        }
        if classes.is_empty() {
            return Err(AlignmentError::EmptyMap(name.to_string()));
        }
        Ok(VisemeMap {
            name: name.to_string(),
            classes,
            lookup,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Viseme classes in declaration order.
    pub fn visemes(&self) -> Vec<VisemeLabel> {
        self.classes.iter().map(|(v, _)| v.clone()).collect()
    }

    /// Phonemes of one class, in declaration order.
    pub fn phonemes_of(&self, viseme: &VisemeLabel) -> Option<&[PhonemeLabel]> {
        self.classes
            .iter()
            .find(|(v, _)| v == viseme)
            .map(|(_, ps)| ps.as_slice())
    }

    /// Every phoneme the map covers, in class-then-declaration order.
    pub fn phonemes(&self) -> Vec<PhonemeLabel> {
        self.classes
            .iter()
            .flat_map(|(_, ps)| ps.iter().cloned())
            .collect()
    }

    pub fn map_to_viseme(&self, phoneme: &PhonemeLabel) -> Result<VisemeLabel, AlignmentError> {
        match self.lookup.get(phoneme) {
            Some(&idx) => Ok(self.classes[idx].0.clone()),
            None => Err(AlignmentError::UnmappedPhoneme(
                phoneme.as_str().to_string(),
                self.name.clone(),
            )),
        }
    }

    /// Serializes to the map-file form: one `VISEME: ph1 ph2 ...` line per class,
    /// in declaration order. Re-parsing the output reconstructs an identical map.
    pub fn to_map_file(&self) -> String {
        let mut out = String::new();
        for (viseme, phonemes) in &self.classes {
            out.push_str(viseme.as_str());
            out.push(':');
            for ph in phonemes {
                out.push(' ');
                out.push_str(ph.as_str());
            }
            out.push('\n');
        }
        out
    }

    /// Parses the map-file form. Lines are `VISEME: ph1 ph2 ...`; blank lines and
    /// lines starting with `#` are ignored; phoneme tokens are normalized; the
    /// first occurrence of a phoneme wins.
    pub fn parse_map_file(name: &str, text: &str) -> Result<Self, AlignmentError> {
        let mut groups: Vec<(VisemeLabel, Vec<PhonemeLabel>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, tail) = line.split_once(':').ok_or_else(|| {
                AlignmentError::MalformedMapLine {
                    line: line_no,
                    reason: "expected `VISEME: ph1 ph2 ...`".to_string(),
                }
            })?;
            let viseme = VisemeLabel::new(head.trim()).map_err(|e| {
                AlignmentError::MalformedMapLine {
                    line: line_no,
                    reason: format!("bad viseme name: {e}"),
                }
            })?;
            let mut phonemes = Vec::new();
            for tok in tail.split_whitespace() {
                let ph = normalize_phoneme(tok).map_err(|e| AlignmentError::MalformedMapLine {
                    line: line_no,
                    reason: format!("bad phoneme {tok:?}: {e}"),
                })?;
                phonemes.push(ph);
            }
            groups.push((viseme, phonemes));
        }
        VisemeMap::from_groups(name, groups)
    }
}

/// The built-in 14-class taxonomy covering the 39 ARPAbet phonemes plus silence.
pub fn lee_map() -> VisemeMap {
    const GROUPS: [(&str, &[&str]); 14] = [
        ("F", &["f", "v"]),
        ("W", &["r", "w"]),
        ("P", &["b", "p", "m"]),
        ("K", &["g", "k", "ng", "n", "l", "y", "hh"]),
        ("T", &["t", "d", "s", "z", "dh", "th"]),
        ("CH", &["ch", "jh", "sh", "zh"]),
        ("IY", &["iy", "ih"]),
        ("EH", &["eh", "ey", "ae"]),
        ("AA", &["aa", "aw", "ay"]),
        ("AH", &["ah"]),
        ("AO", &["ao", "oy", "ow"]),
        ("UH", &["uh", "uw"]),
        ("ER", &["er"]),
        ("sil", &["sil"]),
    ];
    let groups = GROUPS.iter().map(|(v, ps)| {
        (
            VisemeLabel::new(v).expect("builtin viseme name"),
            ps.iter()
                .map(|p| PhonemeLabel::new(p).expect("builtin phoneme"))
                .collect::<Vec<_>>(),
        )
    });
    VisemeMap::from_groups("lee", groups).expect("builtin map is non-empty")
}

/// One aligned phoneme segment: `[start, end)` in seconds within an utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSegment {
    pub utterance_id: String,
    pub phoneme: PhonemeLabel,
    pub start: f64,
    pub end: f64,
}

pub const ALIGNMENT_HEADER: &str = "utterance_id,phoneme,start_s,end_s";

/// Parses an alignment CSV (`utterance_id,phoneme,start_s,end_s` header required).
///
/// Phonemes are normalized, segments are grouped by utterance (first-appearance
/// order) and sorted by start time within each utterance, and overlaps are
/// rejected. Each row must satisfy `0 <= start < end`.
pub fn parse_alignment_csv(text: &str) -> Result<Vec<AlignmentSegment>, AlignmentError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == ALIGNMENT_HEADER => {}
        Some((_, header)) => {
            return Err(AlignmentError::MalformedRow {
                line: 1,
                reason: format!("expected header {ALIGNMENT_HEADER:?}, got {:?}", header.trim_end()),
            })
        }
        None => {
            return Err(AlignmentError::MalformedRow {
                line: 1,
                reason: "empty file".to_string(),
            })
        }
    }

    // Utterances keep first-appearance order; segments are sorted per utterance.
    let mut order: Vec<String> = Vec::new();
    let mut by_utt: BTreeMap<String, Vec<AlignmentSegment>> = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(AlignmentError::MalformedRow {
                line: line_no,
                reason: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let utterance_id = fields[0].trim().to_string();
        if utterance_id.is_empty() {
            return Err(AlignmentError::MalformedRow {
                line: line_no,
                reason: "empty utterance_id".to_string(),
            });
        }
        let phoneme = normalize_phoneme(fields[1]).map_err(|e| AlignmentError::MalformedRow {
            line: line_no,
            reason: format!("bad phoneme {:?}: {e}", fields[1]),
        })?;
        let start: f64 = fields[2].trim().parse().map_err(|_| AlignmentError::MalformedRow {
            line: line_no,
            reason: format!("bad start_s {:?}", fields[2]),
        })?;
        let end: f64 = fields[3].trim().parse().map_err(|_| AlignmentError::MalformedRow {
            line: line_no,
            reason: format!("bad end_s {:?}", fields[3]),
        })?;
        if !start.is_finite() || !end.is_finite() || start < 0.0 {
            return Err(AlignmentError::MalformedRow {
                line: line_no,
                reason: format!("times must be finite and non-negative, got [{start}, {end})"),
            });
        }
        if start >= end {
            return Err(AlignmentError::NonMonotoneTimes {
                line: line_no,
                start,
                end,
            });
        }
        if !by_utt.contains_key(&utterance_id) {
            order.push(utterance_id.clone());
        }
        by_utt.entry(utterance_id.clone()).or_default().push(AlignmentSegment {
            utterance_id,
            phoneme,
            start,
            end,
        });
    }

    let mut out = Vec::new();
    for utt in order {
        let mut segs = by_utt.remove(&utt).expect("utterance recorded in order list");
        segs.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        for w in segs.windows(2) {
            if w[1].start < w[0].end {
                return Err(AlignmentError::OverlappingSegments {
                    utterance: utt.clone(),
                    a_start: w[0].start,
                    a_end: w[0].end,
                    b_start: w[1].start,
                    b_end: w[1].end,
                });
            }
        }
        out.extend(segs);
    }
    Ok(out)
}

/// Serializes segments back to the alignment CSV form. Floats use the shortest
/// round-trip representation, so parse → write → parse is an identity.
pub fn write_alignment_csv(segments: &[AlignmentSegment]) -> String {
    let mut out = String::with_capacity(segments.len() * 32 + ALIGNMENT_HEADER.len() + 1);
    out.push_str(ALIGNMENT_HEADER);
    out.push('\n');
    for seg in segments {
        out.push_str(&format!(
            "{},{},{},{}\n",
            seg.utterance_id, seg.phoneme, seg.start, seg.end
        ));
    }
    out
}
