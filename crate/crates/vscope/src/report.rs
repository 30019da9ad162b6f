//! Deterministic SVG/CSV figure emission.
//!
//! Three figure families: viseme token-count histograms, 2-D scatter plots
//! (viseme = color, phoneme = marker shape), and layer-sweep curves for
//! accuracy or per-viseme F1. Every emitter is a pure function of its inputs —
//! no timestamps, no ambient state — so re-running produces byte-identical
//! files, and each SVG ships with a CSV mirror of exactly the rendered data.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use thiserror::Error;

use crate::alignment::{lee_map, PhonemeLabel, VisemeLabel};
use crate::features::FeatureDataset;
use crate::metrics::EvalReport;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("palette has no color for viseme {0:?}")]
    PaletteIncomplete(String),
    #[error("coords and labels are misaligned: {coords} rows vs {labels} labels")]
    LengthMismatch { coords: usize, labels: usize },
    #[error("inconsistent reports: {0}")]
    Inconsistent(String),
}

/// Ink used for axes, tick labels, and other plot furniture.
pub const INK: &str = "#333333";
/// Background fill behind every plot.
pub const BACKGROUND: &str = "#ffffff";
/// Grid line color.
pub const GRID: &str = "#dddddd";
/// Fixed series colors for curves not keyed by viseme (one per condition).
pub const SERIES_COLORS: [&str; 6] = [
    "#4363d8", "#e6194b", "#3cb44b", "#f58231", "#911eb4", "#008080",
];
/// Dash patterns distinguishing conditions in per-viseme F1 curves.
pub const DASH_CYCLE: [&str; 4] = ["", "6 3", "2 2", "8 2 2 2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Histogram,
    Scatter,
    Line,
}

/// Marker shapes cycled through phonemes within a viseme. Seven primitives
/// cover the largest viseme class (K, 7 phonemes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Plus,
    Star,
}

/// Unit 5-point star, alternating outer radius 1 and inner radius 0.45.
const UNIT_STAR: [(f64, f64); 10] = [
    (0.0, -1.0),
    (0.264, -0.364),
    (0.951, -0.309),
    (0.428, 0.139),
    (0.588, 0.809),
    (0.0, 0.45),
    (-0.588, 0.809),
    (-0.428, 0.139),
    (-0.951, -0.309),
    (-0.264, -0.364),
];
const UNIT_TRIANGLE: [(f64, f64); 3] = [(0.0, -1.0), (0.866, 0.5), (-0.866, 0.5)];
const UNIT_DIAMOND: [(f64, f64); 4] = [(0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)];

impl Marker {
    pub const CYCLE: [Marker; 7] = [
        Marker::Circle,
        Marker::Square,
        Marker::Triangle,
        Marker::Diamond,
        Marker::Cross,
        Marker::Plus,
        Marker::Star,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Marker::Circle => "circle",
            Marker::Square => "square",
            Marker::Triangle => "triangle",
            Marker::Diamond => "diamond",
            Marker::Cross => "cross",
            Marker::Plus => "plus",
            Marker::Star => "star",
        }
    }

    fn polygon(points: &[(f64, f64)], x: f64, y: f64, scale: f64, color: &str) -> String {
        let pts: Vec<String> = points
            .iter()
            .map(|(px, py)| format!("{},{}", fmt2(x + px * scale), fmt2(y + py * scale)))
            .collect();
        format!("<polygon points=\"{}\" fill=\"{color}\"/>", pts.join(" "))
    }

    /// One glyph centered at `(x, y)` with half-extent `s`.
    fn svg(&self, x: f64, y: f64, s: f64, color: &str) -> String {
        match self {
            Marker::Circle => format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"{color}\"/>",
                fmt2(x),
                fmt2(y),
                fmt2(s)
            ),
            Marker::Square => format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>",
                fmt2(x - s),
                fmt2(y - s),
                fmt2(2.0 * s),
                fmt2(2.0 * s)
            ),
            Marker::Triangle => Self::polygon(&UNIT_TRIANGLE, x, y, s * 1.2, color),
            Marker::Diamond => Self::polygon(&UNIT_DIAMOND, x, y, s * 1.25, color),
            Marker::Cross => format!(
                "<path d=\"M {} {} L {} {} M {} {} L {} {}\" stroke=\"{color}\" stroke-width=\"1.5\" fill=\"none\"/>",
                fmt2(x - s), fmt2(y - s), fmt2(x + s), fmt2(y + s),
                fmt2(x - s), fmt2(y + s), fmt2(x + s), fmt2(y - s)
            ),
            Marker::Plus => format!(
                "<path d=\"M {} {} L {} {} M {} {} L {} {}\" stroke=\"{color}\" stroke-width=\"1.5\" fill=\"none\"/>",
                fmt2(x), fmt2(y - s * 1.3), fmt2(x), fmt2(y + s * 1.3),
                fmt2(x - s * 1.3), fmt2(y), fmt2(x + s * 1.3), fmt2(y)
            ),
            Marker::Star => Self::polygon(&UNIT_STAR, x, y, s * 1.5, color),
        }
    }
}

/// Figure configuration: colors, markers, geometry, and captions.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub kind: PlotKind,
    /// Viseme → fill color. Must cover every viseme the data mentions
    /// (except in histograms, which fall back to plain ink).
    pub palette: BTreeMap<VisemeLabel, String>,
    pub marker_cycle: Vec<Marker>,
    pub width: u32,
    pub height: u32,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

impl PlotSpec {
    pub fn histogram(title: &str) -> Self {
        PlotSpec {
            kind: PlotKind::Histogram,
            palette: default_palette(),
            marker_cycle: Marker::CYCLE.to_vec(),
            width: 900,
            height: 480,
            title: title.to_string(),
            x_label: "viseme".to_string(),
            y_label: "tokens".to_string(),
        }
    }

    pub fn scatter(title: &str) -> Self {
        PlotSpec {
            kind: PlotKind::Scatter,
            palette: default_palette(),
            marker_cycle: Marker::CYCLE.to_vec(),
            width: 960,
            height: 640,
            title: title.to_string(),
            x_label: "t-SNE dim 1".to_string(),
            y_label: "t-SNE dim 2".to_string(),
        }
    }

    pub fn line(title: &str, y_label: &str) -> Self {
        PlotSpec {
            kind: PlotKind::Line,
            palette: default_palette(),
            marker_cycle: Marker::CYCLE.to_vec(),
            width: 900,
            height: 520,
            title: title.to_string(),
            x_label: "layer".to_string(),
            y_label: y_label.to_string(),
        }
    }
}

/// Fourteen fixed, maximally-distinct colors keyed by the built-in viseme
/// classes.
pub fn default_palette() -> BTreeMap<VisemeLabel, String> {
    const COLORS: [&str; 14] = [
        "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0",
        "#f032e6", "#bcf60c", "#fabebe", "#008080", "#e6beff", "#9a6324", "#800000",
    ];
    lee_map()
        .visemes()
        .into_iter()
        .zip(COLORS)
        .map(|(v, c)| (v, c.to_string()))
        .collect()
}

/// An emitted figure: the SVG document, its CSV data mirror, and any
/// non-fatal warnings raised during layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPlot {
    pub svg: String,
    pub csv: String,
    pub warnings: Vec<String>,
}

/// Output file stem `{kind}_{condition}_{layer}`; callers append `.svg`/`.csv`.
pub fn plot_basename(kind: &str, condition: &str, layer: u32) -> String {
    format!("{kind}_{condition}_{layer}")
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Pixel rectangle of the data area inside the figure margins.
#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Frame {
    fn new(spec: &PlotSpec, right_margin: f64) -> Frame {
        Frame {
            x0: 64.0,
            y0: 48.0,
            x1: spec.width as f64 - right_margin,
            y1: spec.height as f64 - 56.0,
        }
    }

    fn w(&self) -> f64 {
        self.x1 - self.x0
    }

    fn h(&self) -> f64 {
        self.y1 - self.y0
    }
}

fn svg_open(spec: &PlotSpec) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n\
         <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"{BACKGROUND}\"/>\n\
         <text x=\"{tx}\" y=\"24\" font-size=\"16\" fill=\"{INK}\" text-anchor=\"middle\">{title}</text>\n",
        w = spec.width,
        h = spec.height,
        tx = spec.width / 2,
        title = xml_escape(&spec.title),
    )
}

fn axes(frame: &Frame, spec: &PlotSpec) -> String {
    format!(
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"{INK}\"/>\n\
         <text x=\"{cx}\" y=\"{bx}\" font-size=\"12\" fill=\"{INK}\" text-anchor=\"middle\">{xl}</text>\n\
         <text x=\"18\" y=\"{cy}\" font-size=\"12\" fill=\"{INK}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {cy})\">{yl}</text>\n",
        x0 = fmt2(frame.x0),
        y0 = fmt2(frame.y0),
        w = fmt2(frame.w()),
        h = fmt2(frame.h()),
        cx = fmt2((frame.x0 + frame.x1) / 2.0),
        bx = fmt2(frame.y1 + 40.0),
        cy = fmt2((frame.y0 + frame.y1) / 2.0),
        xl = xml_escape(&spec.x_label),
        yl = xml_escape(&spec.y_label),
    )
}

/// Horizontal grid lines and y-axis tick labels at the given fractions.
fn y_ticks(frame: &Frame, values: &[(f64, String)]) -> String {
    let mut out = String::new();
    for (frac, label) in values {
        let y = frame.y1 - frac * frame.h();
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"{GRID}\"/>\n\
             <text x=\"{lx}\" y=\"{ty}\" font-size=\"10\" fill=\"{INK}\" text-anchor=\"end\">{label}</text>\n",
            x0 = fmt2(frame.x0),
            x1 = fmt2(frame.x1),
            y = fmt2(y),
            lx = fmt2(frame.x0 - 6.0),
            ty = fmt2(y + 3.0),
        ));
    }
    out
}

/// Token-count histogram: one bar per viseme, tallest first (name breaks
/// ties), each bar labeled with its count. Visemes missing from the palette
/// fall back to plain ink — a histogram never fails.
pub fn emit_histogram(ds: &FeatureDataset, spec: &PlotSpec) -> RenderedPlot {
    let mut counts: Vec<(VisemeLabel, usize)> = ds.class_counts().into_iter().collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut csv = String::from("viseme,count\n");
    for (v, n) in &counts {
        csv.push_str(&format!("{v},{n}\n"));
    }

    let frame = Frame::new(spec, 24.0);
    let mut svg = svg_open(spec);
    let max = counts.iter().map(|(_, n)| *n).max().unwrap_or(0);
    let ticks: Vec<(f64, String)> = (0..=4)
        .map(|i| {
            let frac = i as f64 / 4.0;
            (frac, format!("{}", (max as f64 * frac).round() as u64))
        })
        .collect();
    svg.push_str(&y_ticks(&frame, &ticks));
    if max > 0 {
        let slot = frame.w() / counts.len() as f64;
        for (i, (viseme, n)) in counts.iter().enumerate() {
            let h = *n as f64 / max as f64 * frame.h();
            let x = frame.x0 + i as f64 * slot + 0.1 * slot;
            let y = frame.y1 - h;
            let color = spec
                .palette
                .get(viseme)
                .map(String::as_str)
                .unwrap_or(INK);
            svg.push_str(&format!(
                "<rect class=\"bar\" x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"{color}\"/>\n\
                 <text x=\"{cx}\" y=\"{ly}\" font-size=\"10\" fill=\"{INK}\" text-anchor=\"middle\" class=\"count\">{n}</text>\n\
                 <text x=\"{cx}\" y=\"{nx}\" font-size=\"10\" fill=\"{INK}\" text-anchor=\"middle\">{name}</text>\n",
                x = fmt2(x),
                y = fmt2(y),
                w = fmt2(0.8 * slot),
                h = fmt2(h),
                cx = fmt2(x + 0.4 * slot),
                ly = fmt2(y - 4.0),
                nx = fmt2(frame.y1 + 14.0),
                name = xml_escape(viseme.as_str()),
            ));
        }
    }
    svg.push_str(&axes(&frame, spec));
    svg.push_str("</svg>\n");
    RenderedPlot {
        svg,
        csv,
        warnings: Vec::new(),
    }
}

/// Marker assignment: within each viseme, its phonemes (sorted) walk the
/// marker cycle in order.
fn assign_markers(
    labels: &[(VisemeLabel, PhonemeLabel)],
    cycle: &[Marker],
) -> (BTreeMap<(VisemeLabel, PhonemeLabel), Marker>, Vec<String>) {
    let mut phonemes_of: BTreeMap<&VisemeLabel, Vec<&PhonemeLabel>> = BTreeMap::new();
    for (v, p) in labels {
        let list = phonemes_of.entry(v).or_default();
        if !list.contains(&p) {
            list.push(p);
        }
    }
    let mut assignment = BTreeMap::new();
    let mut warnings = Vec::new();
    for (v, mut ps) in phonemes_of {
        ps.sort();
        if ps.len() > cycle.len() {
            warnings.push(format!(
                "viseme {v} has {} phonemes but the marker cycle has {}; shapes repeat",
                ps.len(),
                cycle.len()
            ));
        }
        for (i, p) in ps.into_iter().enumerate() {
            assignment.insert((v.clone(), p.clone()), cycle[i % cycle.len()]);
        }
    }
    (assignment, warnings)
}

/// Linear map of data points into the frame, preserving aspect ratio (one
/// shared scale, centered). Degenerate extents fall back to centering.
fn map_points(coords: &ArrayView2<f64>, frame: &Frame) -> Vec<(f64, f64)> {
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in coords.rows() {
        min_x = min_x.min(row[0]);
        max_x = max_x.max(row[0]);
        min_y = min_y.min(row[1]);
        max_y = max_y.max(row[1]);
    }
    let ex = (max_x - min_x).max(1e-12);
    let ey = (max_y - min_y).max(1e-12);
    let scale = (frame.w() / ex).min(frame.h() / ey);
    let pad_x = (frame.w() - scale * ex) / 2.0;
    let pad_y = (frame.h() - scale * ey) / 2.0;
    coords
        .rows()
        .into_iter()
        .map(|row| {
            (
                frame.x0 + pad_x + (row[0] - min_x) * scale,
                frame.y1 - pad_y - (row[1] - min_y) * scale,
            )
        })
        .collect()
}

/// 2-D scatter of embedding coordinates: one glyph per record, viseme gives
/// the color, phoneme the marker shape. The legend lists both codings.
pub fn emit_scatter(
    coords: &ArrayView2<f64>,
    labels: &[(VisemeLabel, PhonemeLabel)],
    spec: &PlotSpec,
) -> Result<RenderedPlot, ReportError> {
    if coords.nrows() != labels.len() {
        return Err(ReportError::LengthMismatch {
            coords: coords.nrows(),
            labels: labels.len(),
        });
    }
    for (v, _) in labels {
        if !spec.palette.contains_key(v) {
            return Err(ReportError::PaletteIncomplete(v.as_str().to_string()));
        }
    }
    let (markers, warnings) = assign_markers(labels, &spec.marker_cycle);

    let mut csv = String::from("x,y,viseme,phoneme\n");
    for (row, (v, p)) in coords.rows().into_iter().zip(labels) {
        csv.push_str(&format!("{},{},{v},{p}\n", row[0], row[1]));
    }

    let frame = Frame::new(spec, 180.0);
    let mut svg = svg_open(spec);
    svg.push_str(&axes(&frame, spec));
    for ((x, y), (v, p)) in map_points(coords, &frame).into_iter().zip(labels) {
        let color = &spec.palette[v];
        let marker = markers[&(v.clone(), p.clone())];
        svg.push_str(&format!(
            "<g class=\"glyph\" data-marker=\"{}\">{}</g>\n",
            marker.name(),
            marker.svg(x, y, 4.0, color)
        ));
    }

    // Legend: viseme colors first, then phoneme markers.
    let lx = frame.x1 + 16.0;
    let mut ly = frame.y0 + 8.0;
    let mut seen_visemes: Vec<&VisemeLabel> = Vec::new();
    for (v, _) in labels {
        if !seen_visemes.contains(&v) {
            seen_visemes.push(v);
        }
    }
    seen_visemes.sort();
    for v in seen_visemes {
        svg.push_str(&format!(
            "<g class=\"legend-viseme\"><rect x=\"{x}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{c}\"/>\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" fill=\"{INK}\">{name}</text></g>\n",
            x = fmt2(lx),
            y = fmt2(ly),
            c = spec.palette[v],
            tx = fmt2(lx + 16.0),
            ty = fmt2(ly + 9.0),
            name = xml_escape(v.as_str()),
        ));
        ly += 16.0;
    }
    ly += 10.0;
    for ((v, p), marker) in &markers {
        svg.push_str(&format!(
            "<g class=\"legend-phoneme\">{}<text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" fill=\"{INK}\">{name}</text></g>\n",
            marker.svg(lx + 5.0, ly + 4.0, 4.0, INK),
            tx = fmt2(lx + 16.0),
            ty = fmt2(ly + 8.0),
            name = xml_escape(&format!("{p} ({v})")),
        ));
        ly += 16.0;
    }
    svg.push_str("</svg>\n");
    Ok(RenderedPlot { svg, csv, warnings })
}

/// Which metric a layer-curve plot tracks.
#[derive(Debug, Clone, PartialEq)]
pub enum CurveMetric {
    /// One line per condition, y = overall accuracy.
    Accuracy,
    /// One line per (condition, viseme) pair, y = that viseme's F1.
    /// `visemes: None` plots every class present in the reports.
    F1 { visemes: Option<Vec<VisemeLabel>> },
}

struct Series {
    name: String,
    color: String,
    dash: String,
    points: Vec<(u32, f64)>,
    csv_rows: Vec<String>,
}

/// Layer-sweep curves across conditions. Warns (`SparseLayers`) when any
/// condition covers a non-contiguous or single-layer range; points still
/// render.
pub fn emit_layer_curves(
    reports: &[EvalReport],
    metric: &CurveMetric,
    spec: &PlotSpec,
) -> Result<RenderedPlot, ReportError> {
    let mut by_condition: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        by_condition.entry(&r.condition).or_default().push(r);
    }
    let mut warnings = Vec::new();
    for (cond, list) in &mut by_condition {
        list.sort_by_key(|r| r.layer);
        for pair in list.windows(2) {
            if pair[0].layer == pair[1].layer {
                return Err(ReportError::Inconsistent(format!(
                    "duplicate report for condition {cond:?} layer {}",
                    pair[0].layer
                )));
            }
            if pair[1].layer != pair[0].layer + 1 {
                warnings.push(format!(
                    "SparseLayers: condition {cond:?} jumps from layer {} to {}",
                    pair[0].layer, pair[1].layer
                ));
            }
        }
        if list.len() == 1 {
            warnings.push(format!(
                "SparseLayers: condition {cond:?} has a single layer; drawing points only"
            ));
        }
    }

    let mut series: Vec<Series> = Vec::new();
    match metric {
        CurveMetric::Accuracy => {
            for (i, (cond, list)) in by_condition.iter().enumerate() {
                let points: Vec<(u32, f64)> =
                    list.iter().map(|r| (r.layer, r.accuracy)).collect();
                let csv_rows = points
                    .iter()
                    .map(|(l, a)| format!("{cond},{l},{a}"))
                    .collect();
                series.push(Series {
                    name: cond.to_string(),
                    color: SERIES_COLORS[i % SERIES_COLORS.len()].to_string(),
                    dash: String::new(),
                    points,
                    csv_rows,
                });
            }
        }
        CurveMetric::F1 { visemes } => {
            let wanted: Vec<VisemeLabel> = match visemes {
                Some(list) => list.clone(),
                None => {
                    let mut all: Vec<VisemeLabel> = Vec::new();
                    for r in reports {
                        for c in &r.per_class {
                            let v = VisemeLabel::new(&c.viseme)
                                .map_err(|e| ReportError::Inconsistent(e.to_string()))?;
                            if !all.contains(&v) {
                                all.push(v);
                            }
                        }
                    }
                    all.sort();
                    all
                }
            };
            for v in &wanted {
                if !spec.palette.contains_key(v) {
                    return Err(ReportError::PaletteIncomplete(v.as_str().to_string()));
                }
            }
            for (ci, (cond, list)) in by_condition.iter().enumerate() {
                for v in &wanted {
                    let mut points = Vec::new();
                    let mut csv_rows = Vec::new();
                    for r in list {
                        if let Some(c) = r.per_class.iter().find(|c| c.viseme == v.as_str()) {
                            points.push((r.layer, c.f1));
                            csv_rows.push(format!("{cond},{},{v},{}", r.layer, c.f1));
                        }
                    }
                    if points.is_empty() {
                        warnings.push(format!(
                            "viseme {v} does not appear in condition {cond:?}; series skipped"
                        ));
                        continue;
                    }
                    series.push(Series {
                        name: format!("{cond}/{v}"),
                        color: spec.palette[v].clone(),
                        dash: DASH_CYCLE[ci % DASH_CYCLE.len()].to_string(),
                        points,
                        csv_rows,
                    });
                }
            }
        }
    }

    let (min_layer, max_layer) = reports
        .iter()
        .fold((u32::MAX, 0u32), |(lo, hi), r| (lo.min(r.layer), hi.max(r.layer)));
    let span = if reports.is_empty() {
        1.0
    } else {
        (max_layer - min_layer).max(1) as f64
    };

    let frame = Frame::new(spec, 180.0);
    let px = |layer: u32| frame.x0 + (layer - min_layer) as f64 / span * frame.w();
    let py = |value: f64| frame.y1 - value.clamp(0.0, 1.0) * frame.h();

    let mut svg = svg_open(spec);
    let ticks: Vec<(f64, String)> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&f| (f, format!("{f}")))
        .collect();
    svg.push_str(&y_ticks(&frame, &ticks));
    if !reports.is_empty() {
        for layer in min_layer..=max_layer {
            svg.push_str(&format!(
                "<text x=\"{x}\" y=\"{y}\" font-size=\"10\" fill=\"{INK}\" text-anchor=\"middle\">{layer}</text>\n",
                x = fmt2(px(layer)),
                y = fmt2(frame.y1 + 14.0),
            ));
        }
    }
    svg.push_str(&axes(&frame, spec));

    let mut csv = match metric {
        CurveMetric::Accuracy => String::from("condition,layer,accuracy\n"),
        CurveMetric::F1 { .. } => String::from("condition,layer,viseme,f1\n"),
    };
    let mut ly = frame.y0 + 8.0;
    for s in &series {
        if s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|(l, v)| format!("{},{}", fmt2(px(*l)), fmt2(py(*v))))
                .collect();
            let dash = if s.dash.is_empty() {
                String::new()
            } else {
                format!(" stroke-dasharray=\"{}\"", s.dash)
            };
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{dash}/>\n",
                pts.join(" "),
                s.color
            ));
        }
        for (l, v) in &s.points {
            svg.push_str(&format!(
                "<circle class=\"pt\" cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n",
                fmt2(px(*l)),
                fmt2(py(*v)),
                s.color
            ));
        }
        for row in &s.csv_rows {
            csv.push_str(row);
            csv.push('\n');
        }
        svg.push_str(&format!(
            "<g class=\"legend-series\"><line x1=\"{x}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"{c}\" stroke-width=\"1.5\"{dash}/>\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" fill=\"{INK}\">{name}</text></g>\n",
            x = fmt2(frame.x1 + 10.0),
            x2 = fmt2(frame.x1 + 28.0),
            y = fmt2(ly),
            c = s.color,
            dash = if s.dash.is_empty() {
                String::new()
            } else {
                format!(" stroke-dasharray=\"{}\"", s.dash)
            },
            tx = fmt2(frame.x1 + 34.0),
            ty = fmt2(ly + 4.0),
            name = xml_escape(&s.name),
        ));
        ly += 16.0;
    }
    svg.push_str("</svg>\n");
    Ok(RenderedPlot { svg, csv, warnings })
}
