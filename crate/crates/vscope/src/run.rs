//! End-to-end pipeline orchestration with reproducible run manifests.
//!
//! Every subcommand of the `vscope` binary resolves one [`RunConfig`], runs
//! its stages, and finishes by atomically writing a [`RunManifest`] that
//! records the resolved configuration, input digests, per-stage wall-clock,
//! and the exact list of files produced. All randomness flows from
//! `RunConfig.seed` through named sub-seeds, so a run is a pure function of
//! its config plus its input files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alignment::{lee_map, parse_alignment_csv, VisemeLabel, VisemeMap};
use crate::features::manifest::CorpusManifest;
use crate::features::synth::{generate_synthetic_corpus, write_corpus, SynthSpec};
use crate::features::{
    balanced_subsample, build_dataset, read_feature_csv, write_feature_csv, FeatureDataset,
};
use crate::ioutil;
use crate::metrics::{confusion, eval_report, f1_by_layer_csv, EvalReport};
use crate::probe::{predict, split_train_val, train_log_csv, train_probe, ProbeConfig};
use crate::report::{
    emit_histogram, emit_layer_curves, emit_scatter, plot_basename, CurveMetric, PlotSpec,
};
use crate::seed::sub_seed;
use crate::tsne::{run_tsne, TsneConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Feature cache filename inside the output directory.
pub const FEATURE_CACHE: &str = "features.csv";

/// A full pipeline configuration. Defaults follow the method's published
/// settings; a JSON config file may set any subset of fields, and long-form
/// CLI flags override individual values on top of that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus manifest (JSON list of embedding containers).
    pub corpus: PathBuf,
    /// Phoneme alignment CSV.
    pub alignment: PathBuf,
    /// Builtin viseme map name (`"lee"`) or a path to a map file.
    pub viseme_map: String,
    /// Transformer layers to analyze. Must be non-empty.
    pub layers: Vec<u32>,
    /// Input conditions to analyze. Empty means every condition in the corpus.
    pub conditions: Vec<String>,
    pub tsne: TsneConfig,
    pub probe: ProbeConfig,
    /// Balanced subsample cap per viseme class for t-SNE.
    pub per_class: usize,
    /// Master seed; every stage derives its own named sub-seed from it.
    pub seed: u64,
    /// Output directory. Falls back to `$VSCOPE_OUT`, then `./out`.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("manifest.json"),
            alignment: PathBuf::from("alignment.csv"),
            viseme_map: "lee".to_string(),
            layers: vec![0],
            conditions: Vec::new(),
            tsne: TsneConfig::default(),
            probe: ProbeConfig::default(),
            per_class: 500,
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    /// Loads a config file and checks its invariants (no path checks here;
    /// those happen per command, because `synth` creates its own inputs).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Output directory after the `--out` > config > `$VSCOPE_OUT` > `./out`
    /// fallback chain. The flag layer is applied by the binary before this.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        if let Ok(env_out) = std::env::var("VSCOPE_OUT") {
            if !env_out.is_empty() {
                return PathBuf::from(env_out);
            }
        }
        PathBuf::from("out")
    }

    fn validate_inputs(&self) -> Result<()> {
        if self.layers.is_empty() {
            bail!("layer list must be non-empty");
        }
        for (what, path) in [("corpus manifest", &self.corpus), ("alignment", &self.alignment)] {
            if !path.exists() {
                bail!("{what} {} does not exist", path.display());
            }
        }
        if self.viseme_map != "lee" && !Path::new(&self.viseme_map).exists() {
            bail!(
                "viseme map {:?} is neither the builtin \"lee\" nor an existing file",
                self.viseme_map
            );
        }
        Ok(())
    }

    /// Resolves the viseme map field to an actual map.
    pub fn load_viseme_map(&self) -> Result<VisemeMap> {
        load_viseme_map(&self.viseme_map)
    }
}

/// `"lee"` loads the builtin map; anything else is read as a map file whose
/// name is the file stem.
pub fn load_viseme_map(spec: &str) -> Result<VisemeMap> {
    if spec == "lee" {
        return Ok(lee_map());
    }
    let path = Path::new(spec);
    let text =
        fs::read_to_string(path).with_context(|| format!("reading viseme map {spec}"))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "custom".to_string());
    VisemeMap::parse_map_file(&name, &text).with_context(|| format!("parsing viseme map {spec}"))
}

/// The record of one completed run: what was configured, what was read, what
/// was produced, and how long each stage took. Written atomically to
/// `run_manifest_{subcommand}.json`; the manifest does not list itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub config: RunConfig,
    /// Input path → lowercase hex SHA-256 of its bytes.
    pub input_digests: BTreeMap<String, String>,
    /// Non-fatal drop tallies (e.g. alignment segments with no frame center).
    pub skip_counts: BTreeMap<String, u64>,
    /// Stage name → elapsed seconds.
    pub stage_seconds: BTreeMap<String, f64>,
    /// Files produced, relative to the output directory, in creation order.
    pub outputs: Vec<String>,
    /// Jobs that failed after partial results were flushed; empty on success.
    pub failures: Vec<String>,
}

impl RunManifest {
    fn new(subcommand: &str, config: RunConfig) -> Self {
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            subcommand: subcommand.to_string(),
            config,
            input_digests: BTreeMap::new(),
            skip_counts: BTreeMap::new(),
            stage_seconds: BTreeMap::new(),
            outputs: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn path(out_dir: &Path, subcommand: &str) -> PathBuf {
        out_dir.join(format!("run_manifest_{subcommand}.json"))
    }

    fn digest_input(&mut self, path: &Path) -> Result<()> {
        let digest = ioutil::sha256_file(path)
            .with_context(|| format!("digesting input {}", path.display()))?;
        self.input_digests.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = Self::path(out_dir, &self.subcommand);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        ioutil::write_atomic(&path, json.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Tracks files written under one output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        ioutil::write_atomic(&path, bytes)
            .with_context(|| format!("writing {}", path.display()))?;
        self.files.push(rel.to_string());
        Ok(())
    }
}

/// Runs `f` over `jobs` on up to `workers` threads, returning results in job
/// order regardless of completion order. `workers == 1` runs inline, which
/// guarantees bitwise-reproducible output ordering end to end.
pub fn run_jobs<J, R, F>(jobs: &[J], workers: usize, f: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(usize, &J) -> R + Sync,
{
    let workers = workers.max(1).min(jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().enumerate().map(|(i, j)| f(i, j)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(i, &jobs[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("worker finished").expect("slot filled"))
        .collect()
}

/// Named sub-seed for one (stage, condition, layer) cell. Content-derived, so
/// it does not depend on which other jobs a particular invocation requested.
fn job_seed(master: u64, stage: &str, condition: &str, layer: u32) -> u64 {
    sub_seed(master, &format!("{stage}:{condition}:{layer}"), 0)
}

fn dataset_matrix(ds: &FeatureDataset) -> Array2<f64> {
    let dim = ds.dim().unwrap_or(0);
    let mut x = Array2::zeros((ds.records.len(), dim));
    for (i, r) in ds.records.iter().enumerate() {
        for (j, v) in r.vector.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    x
}

/// The (condition, layer) grid in configuration order.
fn job_grid(cfg: &RunConfig) -> Vec<(String, u32)> {
    let mut grid = Vec::new();
    for c in &cfg.conditions {
        for &l in &cfg.layers {
            grid.push((c.clone(), l));
        }
    }
    grid
}

/// Fills an empty `conditions` list from the corpus manifest.
fn resolve_conditions(cfg: &mut RunConfig) -> Result<()> {
    if cfg.conditions.is_empty() {
        let manifest = CorpusManifest::load(&cfg.corpus)
            .with_context(|| format!("loading corpus manifest {}", cfg.corpus.display()))?;
        cfg.conditions = manifest.conditions();
    }
    if cfg.conditions.is_empty() {
        bail!("corpus manifest lists no conditions");
    }
    Ok(())
}

fn load_feature_cache(out_dir: &Path, manifest: &mut RunManifest) -> Result<FeatureDataset> {
    let path = out_dir.join(FEATURE_CACHE);
    if !path.exists() {
        bail!(
            "feature cache {} not found; run build-features first",
            path.display()
        );
    }
    manifest.digest_input(&path)?;
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    read_feature_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

struct StageClock {
    start: Instant,
}

impl StageClock {
    fn start() -> Self {
        StageClock {
            start: Instant::now(),
        }
    }

    fn lap(&mut self, manifest: &mut RunManifest, stage: &str) {
        let elapsed = self.start.elapsed().as_secs_f64();
        manifest.stage_seconds.insert(stage.to_string(), elapsed);
        self.start = Instant::now();
    }
}

/// `build-features`: corpus + alignment → pooled feature cache CSV.
pub fn cmd_build_features(mut cfg: RunConfig) -> Result<RunManifest> {
    cfg.validate_inputs()?;
    resolve_conditions(&mut cfg)?;
    let out_dir = cfg.out_dir();
    let map = cfg.load_viseme_map()?;

    let mut manifest = RunManifest::new("build-features", cfg.clone());
    manifest.digest_input(&cfg.corpus)?;
    manifest.digest_input(&cfg.alignment)?;
    if cfg.viseme_map != "lee" {
        manifest.digest_input(Path::new(&cfg.viseme_map))?;
    }

    let mut clock = StageClock::start();
    let sequences =
        crate::features::manifest::load_corpus(&cfg.corpus, &cfg.conditions, &cfg.layers)
            .context("loading corpus embeddings")?;
    for (c, l) in job_grid(&cfg) {
        if !sequences.iter().any(|s| s.condition == c && s.layer == l) {
            bail!("corpus has no embeddings for condition {c:?} layer {l}");
        }
    }
    clock.lap(&mut manifest, "load-corpus");

    let alignment_text = fs::read_to_string(&cfg.alignment)
        .with_context(|| format!("reading {}", cfg.alignment.display()))?;
    let segments = parse_alignment_csv(&alignment_text)
        .with_context(|| format!("parsing {}", cfg.alignment.display()))?;
    clock.lap(&mut manifest, "parse-alignment");

    let ds = build_dataset(&sequences, &segments, &map).context("building feature dataset")?;
    manifest
        .skip_counts
        .insert("skipped_segments".to_string(), ds.skipped_segments as u64);
    clock.lap(&mut manifest, "build-dataset");

    let mut outputs = Outputs::new(&out_dir)?;
    outputs.write(FEATURE_CACHE, write_feature_csv(&ds).as_bytes())?;
    clock.lap(&mut manifest, "write-cache");

    manifest.outputs = outputs.files;
    manifest.write(&out_dir)?;
    Ok(manifest)
}

/// Per-pair t-SNE quality summary, mirrored into `tsne_quality.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsneQuality {
    pub condition: String,
    pub layer: u32,
    pub final_kl: f64,
    pub trustworthiness: f64,
    pub trust_k: usize,
    pub restart_index: usize,
    pub restarts_run: usize,
}

struct TsneJobResult {
    files: Vec<(String, Vec<u8>)>,
    quality: Option<TsneQuality>,
    warnings: Vec<String>,
    seconds: f64,
    error: Option<String>,
}

fn tsne_job(cfg: &RunConfig, ds: &FeatureDataset, condition: &str, layer: u32) -> TsneJobResult {
    let start = Instant::now();
    let mut result = TsneJobResult {
        files: Vec::new(),
        quality: None,
        warnings: Vec::new(),
        seconds: 0.0,
        error: None,
    };
    let run = (|| -> Result<()> {
        let slice = ds.filter(condition, layer);
        if slice.records.is_empty() {
            bail!("feature cache has no records for condition {condition:?} layer {layer}");
        }
        let sample = balanced_subsample(
            &slice,
            cfg.per_class,
            job_seed(cfg.seed, "subsample", condition, layer),
        );
        let x = dataset_matrix(&sample);
        let mut tsne_cfg = cfg.tsne.clone();
        tsne_cfg.seed = job_seed(cfg.seed, "tsne", condition, layer);
        let embedded = run_tsne(&x.view(), &tsne_cfg)
            .with_context(|| format!("t-SNE for condition {condition:?} layer {layer}"))?;
        result.warnings.extend(embedded.warnings.iter().cloned());

        let labels: Vec<_> = sample
            .records
            .iter()
            .map(|r| (r.viseme.clone(), r.phoneme.clone()))
            .collect();
        let spec = PlotSpec::scatter(&format!("t-SNE {condition} layer {layer}"));
        let plot = emit_scatter(&embedded.coords.view(), &labels, &spec)
            .with_context(|| format!("scatter for condition {condition:?} layer {layer}"))?;
        result.warnings.extend(plot.warnings.iter().cloned());
        let base = plot_basename("scatter", condition, layer);
        result
            .files
            .push((format!("{base}.svg"), plot.svg.into_bytes()));
        result
            .files
            .push((format!("{base}.csv"), plot.csv.into_bytes()));
        result.quality = Some(TsneQuality {
            condition: condition.to_string(),
            layer,
            final_kl: embedded.final_kl,
            trustworthiness: embedded.trustworthiness_k12,
            trust_k: embedded.trust_k,
            restart_index: embedded.restart_index,
            restarts_run: embedded.restarts_run,
        });
        Ok(())
    })();
    if let Err(e) = run {
        result.error = Some(format!("{e:#}"));
    }
    result.seconds = start.elapsed().as_secs_f64();
    result
}

/// `tsne`: balanced subsample → 2-D embedding → scatter SVG/CSV per
/// (condition, layer) pair, plus a shared `tsne_quality.json`.
pub fn cmd_tsne(mut cfg: RunConfig, jobs: usize) -> Result<RunManifest> {
    cfg.validate_inputs()?;
    resolve_conditions(&mut cfg)?;
    let out_dir = cfg.out_dir();
    let mut manifest = RunManifest::new("tsne", cfg.clone());
    let ds = load_feature_cache(&out_dir, &mut manifest)?;

    let grid = job_grid(&cfg);
    let results = run_jobs(&grid, jobs, |_, (condition, layer)| {
        tsne_job(&cfg, &ds, condition, *layer)
    });

    let mut outputs = Outputs::new(&out_dir)?;
    let mut qualities = Vec::new();
    for ((condition, layer), r) in grid.iter().zip(results) {
        manifest
            .stage_seconds
            .insert(format!("tsne:{condition}:{layer}"), r.seconds);
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
        match r.error {
            Some(err) => {
                let marker = format!("FAILED_{condition}_{layer}.txt");
                outputs.write(&marker, format!("{err}\n").as_bytes())?;
                manifest
                    .failures
                    .push(format!("tsne {condition} layer {layer}: {err}"));
            }
            None => {
                for (name, bytes) in r.files {
                    outputs.write(&name, &bytes)?;
                }
                qualities.extend(r.quality);
            }
        }
    }
    let quality_json = serde_json::to_string_pretty(&qualities).expect("quality serializes") + "\n";
    outputs.write("tsne_quality.json", quality_json.as_bytes())?;

    manifest.outputs = outputs.files;
    manifest.write(&out_dir)?;
    if !manifest.failures.is_empty() {
        bail!(
            "{} of {} t-SNE jobs failed:\n  {}",
            manifest.failures.len(),
            grid.len(),
            manifest.failures.join("\n  ")
        );
    }
    Ok(manifest)
}

struct ProbeJobResult {
    files: Vec<(String, Vec<u8>)>,
    report: Option<EvalReport>,
    seconds: f64,
    error: Option<String>,
}

fn probe_job(
    cfg: &RunConfig,
    ds: &FeatureDataset,
    class_index: &[VisemeLabel],
    condition: &str,
    layer: u32,
) -> ProbeJobResult {
    let start = Instant::now();
    let mut result = ProbeJobResult {
        files: Vec::new(),
        report: None,
        seconds: 0.0,
        error: None,
    };
    let run = (|| -> Result<()> {
        let slice = ds.filter(condition, layer);
        if slice.records.is_empty() {
            bail!("feature cache has no records for condition {condition:?} layer {layer}");
        }
        let mut probe_cfg = cfg.probe.clone();
        probe_cfg.seed = job_seed(cfg.seed, "probe", condition, layer);
        probe_cfg.input_dim = slice.dim().expect("non-empty slice");
        probe_cfg.classes = class_index.len();

        let (train, val) = split_train_val(
            &slice,
            probe_cfg.val_fraction,
            sub_seed(probe_cfg.seed, "split", 0),
        )
        .with_context(|| format!("splitting condition {condition:?} layer {layer}"))?;
        let (model, trace) = train_probe(&train, &val, class_index, &probe_cfg)
            .with_context(|| format!("training probe for condition {condition:?} layer {layer}"))?;

        let x_val = dataset_matrix(&val);
        let predicted = predict(&model, &x_val.view());
        let truth: Vec<VisemeLabel> = val.records.iter().map(|r| r.viseme.clone()).collect();
        let cm = confusion(&truth, &predicted, class_index)
            .with_context(|| format!("scoring condition {condition:?} layer {layer}"))?;
        let report = eval_report(&cm, condition, layer);

        let report_json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        result.files.push((
            format!("eval_report_{condition}_{layer}.json"),
            report_json.into_bytes(),
        ));
        result.files.push((
            format!("train_log_{condition}_{layer}.csv"),
            train_log_csv(&trace).into_bytes(),
        ));
        result.files.push((
            format!("probe_{condition}_{layer}.model"),
            crate::probe::model_to_bytes(&model, &probe_cfg),
        ));
        result.report = Some(report);
        Ok(())
    })();
    if let Err(e) = run {
        result.error = Some(format!("{e:#}"));
    }
    result.seconds = start.elapsed().as_secs_f64();
    result
}

/// `probe-sweep`: one probe per (layer, condition); per-pair eval reports,
/// train logs, and model files, plus `f1_by_layer.csv` and curve figures.
pub fn cmd_probe_sweep(mut cfg: RunConfig, jobs: usize) -> Result<RunManifest> {
    cfg.validate_inputs()?;
    resolve_conditions(&mut cfg)?;
    let out_dir = cfg.out_dir();
    let map = cfg.load_viseme_map()?;
    let class_index = map.visemes();

    let mut manifest = RunManifest::new("probe-sweep", cfg.clone());
    let ds = load_feature_cache(&out_dir, &mut manifest)?;

    let grid = job_grid(&cfg);
    let results = run_jobs(&grid, jobs, |_, (condition, layer)| {
        probe_job(&cfg, &ds, &class_index, condition, *layer)
    });

    let mut outputs = Outputs::new(&out_dir)?;
    let mut reports = Vec::new();
    for ((condition, layer), r) in grid.iter().zip(results) {
        manifest
            .stage_seconds
            .insert(format!("probe:{condition}:{layer}"), r.seconds);
        match r.error {
            Some(err) => {
                let marker = format!("FAILED_{condition}_{layer}.txt");
                outputs.write(&marker, format!("{err}\n").as_bytes())?;
                manifest
                    .failures
                    .push(format!("probe {condition} layer {layer}: {err}"));
            }
            None => {
                for (name, bytes) in r.files {
                    outputs.write(&name, &bytes)?;
                }
                reports.extend(r.report);
            }
        }
    }

    if !reports.is_empty() {
        let mut clock = StageClock::start();
        outputs.write("f1_by_layer.csv", f1_by_layer_csv(&reports).as_bytes())?;
        let acc = emit_layer_curves(
            &reports,
            &CurveMetric::Accuracy,
            &PlotSpec::line("probe accuracy by layer", "accuracy"),
        )
        .context("accuracy curves")?;
        let f1 = emit_layer_curves(
            &reports,
            &CurveMetric::F1 { visemes: None },
            &PlotSpec::line("per-viseme F1 by layer", "F1"),
        )
        .context("F1 curves")?;
        for w in acc.warnings.iter().chain(&f1.warnings) {
            eprintln!("warning: {w}");
        }
        outputs.write("curves_accuracy.svg", acc.svg.as_bytes())?;
        outputs.write("curves_accuracy.csv", acc.csv.as_bytes())?;
        outputs.write("curves_f1.svg", f1.svg.as_bytes())?;
        outputs.write("curves_f1.csv", f1.csv.as_bytes())?;
        clock.lap(&mut manifest, "curves");
    }

    manifest.outputs = outputs.files;
    manifest.write(&out_dir)?;
    if !manifest.failures.is_empty() {
        bail!(
            "{} of {} probe jobs failed:\n  {}",
            manifest.failures.len(),
            grid.len(),
            manifest.failures.join("\n  ")
        );
    }
    Ok(manifest)
}

/// `report`: re-emit figures from existing artifacts — token histograms from
/// the feature cache, and layer curves from any eval reports already present.
pub fn cmd_report(mut cfg: RunConfig) -> Result<RunManifest> {
    cfg.validate_inputs()?;
    resolve_conditions(&mut cfg)?;
    let out_dir = cfg.out_dir();
    let mut manifest = RunManifest::new("report", cfg.clone());
    let ds = load_feature_cache(&out_dir, &mut manifest)?;

    let mut clock = StageClock::start();
    let mut outputs = Outputs::new(&out_dir)?;
    for (condition, layer) in job_grid(&cfg) {
        let slice = ds.filter(&condition, layer);
        if slice.records.is_empty() {
            bail!("feature cache has no records for condition {condition:?} layer {layer}");
        }
        let spec = PlotSpec::histogram(&format!("viseme tokens {condition} layer {layer}"));
        let plot = emit_histogram(&slice, &spec);
        let base = plot_basename("histogram", &condition, layer);
        outputs.write(&format!("{base}.svg"), plot.svg.as_bytes())?;
        outputs.write(&format!("{base}.csv"), plot.csv.as_bytes())?;
    }
    clock.lap(&mut manifest, "histograms");

    let mut reports = Vec::new();
    for (condition, layer) in job_grid(&cfg) {
        let path = out_dir.join(format!("eval_report_{condition}_{layer}.json"));
        if !path.exists() {
            continue;
        }
        manifest.digest_input(&path)?;
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let report: EvalReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        reports.push(report);
    }
    if !reports.is_empty() {
        let acc = emit_layer_curves(
            &reports,
            &CurveMetric::Accuracy,
            &PlotSpec::line("probe accuracy by layer", "accuracy"),
        )
        .context("accuracy curves")?;
        let f1 = emit_layer_curves(
            &reports,
            &CurveMetric::F1 { visemes: None },
            &PlotSpec::line("per-viseme F1 by layer", "F1"),
        )
        .context("F1 curves")?;
        for w in acc.warnings.iter().chain(&f1.warnings) {
            eprintln!("warning: {w}");
        }
        outputs.write("curves_accuracy.svg", acc.svg.as_bytes())?;
        outputs.write("curves_accuracy.csv", acc.csv.as_bytes())?;
        outputs.write("curves_f1.svg", f1.svg.as_bytes())?;
        outputs.write("curves_f1.csv", f1.csv.as_bytes())?;
    }
    clock.lap(&mut manifest, "curves");

    manifest.outputs = outputs.files;
    manifest.write(&out_dir)?;
    Ok(manifest)
}

/// `synth`: generate a synthetic corpus (embeddings, manifest, alignment)
/// under the output directory.
pub fn cmd_synth(spec_path: &Path, viseme_map: &str, seed: u64, out_dir: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading synth spec {}", spec_path.display()))?;
    let spec = SynthSpec::parse(&text)
        .with_context(|| format!("parsing synth spec {}", spec_path.display()))?;
    let map = load_viseme_map(viseme_map)?;

    let mut cfg = RunConfig {
        corpus: out_dir.join("manifest.json"),
        alignment: out_dir.join("alignment.csv"),
        viseme_map: viseme_map.to_string(),
        layers: spec.layers.clone(),
        seed,
        out: Some(out_dir.to_path_buf()),
        ..RunConfig::default()
    };
    cfg.conditions = spec.conditions.iter().map(|c| c.name.clone()).collect();

    let mut manifest = RunManifest::new("synth", cfg);
    manifest.digest_input(spec_path)?;

    let mut clock = StageClock::start();
    let corpus = generate_synthetic_corpus(&spec, &map, seed).context("generating corpus")?;
    clock.lap(&mut manifest, "generate");
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    write_corpus(&corpus, out_dir).context("writing corpus")?;
    clock.lap(&mut manifest, "write");

    for seq in &corpus.sequences {
        manifest.outputs.push(format!(
            "emb/{}/layer{}/{}.emb1",
            seq.condition, seq.layer, seq.utterance_id
        ));
    }
    manifest.outputs.push("manifest.json".to_string());
    manifest.outputs.push("alignment.csv".to_string());
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// `validate`: format checks only — the corpus manifest, every embedding
/// container it lists, the alignment CSV, and the viseme map must parse and
/// agree. Produces no artifacts beyond its run manifest.
pub fn cmd_validate(cfg: RunConfig) -> Result<RunManifest> {
    cfg.validate_inputs()?;
    let map = cfg.load_viseme_map()?;
    let mut manifest = RunManifest::new("validate", cfg.clone());
    manifest.digest_input(&cfg.corpus)?;
    manifest.digest_input(&cfg.alignment)?;
    if cfg.viseme_map != "lee" {
        manifest.digest_input(Path::new(&cfg.viseme_map))?;
    }

    let mut clock = StageClock::start();
    let corpus_manifest = CorpusManifest::load(&cfg.corpus)
        .with_context(|| format!("loading corpus manifest {}", cfg.corpus.display()))?;
    let base = cfg.corpus.parent().unwrap_or_else(|| Path::new("."));
    for entry in &corpus_manifest.entries {
        let path = base.join(&entry.path);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        crate::features::emb1::read_embedding_container(&bytes, entry.dim)
            .with_context(|| format!("validating {}", path.display()))?;
    }
    clock.lap(&mut manifest, "containers");

    let alignment_text = fs::read_to_string(&cfg.alignment)
        .with_context(|| format!("reading {}", cfg.alignment.display()))?;
    let segments = parse_alignment_csv(&alignment_text)
        .with_context(|| format!("parsing {}", cfg.alignment.display()))?;
    for seg in &segments {
        map.map_to_viseme(&seg.phoneme).with_context(|| {
            format!(
                "alignment references phoneme {:?} outside viseme map {:?}",
                seg.phoneme.as_str(),
                map.name()
            )
        })?;
    }
    clock.lap(&mut manifest, "alignment");

    println!(
        "ok: {} embedding containers, {} alignment segments, {} viseme classes",
        corpus_manifest.entries.len(),
        segments.len(),
        map.visemes().len()
    );
    let out_dir = cfg.out_dir();
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    manifest.write(&out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::synth::SynthCondition;
    use tempfile::tempdir;

    #[test]
    fn run_config_defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        // A partial file fills the rest with defaults.
        let partial: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "layers": [3, 4]}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.layers, vec![3, 4]);
        assert_eq!(partial.per_class, 500);
        assert_eq!(partial.tsne.perplexity, 30.0);
    }

    #[test]
    fn run_config_rejects_unknown_fields() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sede": 7}"#).unwrap_err();
        assert!(err.to_string().contains("sede"));
    }

    #[test]
    fn viseme_map_resolves_builtin_and_files() {
        assert_eq!(load_viseme_map("lee").unwrap().name(), "lee");
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.map");
        fs::write(&path, "A: x y\nB: z\n").unwrap();
        let map = load_viseme_map(path.to_str().unwrap()).unwrap();
        assert_eq!(map.name(), "tiny");
        assert_eq!(map.visemes().len(), 2);
        assert!(load_viseme_map("/nope/missing.map").is_err());
    }

    #[test]
    fn out_dir_falls_back_from_config_to_default() {
        // These must not consult the environment when `out` is set.
        let cfg = RunConfig {
            out: Some(PathBuf::from("/tmp/explicit")),
            ..RunConfig::default()
        };
        assert_eq!(cfg.out_dir(), PathBuf::from("/tmp/explicit"));
        // The VSCOPE_OUT branch is exercised through the binary in the CLI
        // integration tests; process-global env mutation is not thread-safe
        // under the parallel test runner.
    }

    #[test]
    fn job_runner_returns_results_in_job_order() {
        let jobs: Vec<usize> = (0..17).collect();
        let sequential = run_jobs(&jobs, 1, |i, j| (i, j * j));
        let threaded = run_jobs(&jobs, 4, |i, j| (i, j * j));
        assert_eq!(sequential, threaded);
        for (i, (slot, sq)) in threaded.iter().enumerate() {
            assert_eq!(*slot, i);
            assert_eq!(*sq, i * i);
        }
    }

    #[test]
    fn job_seeds_are_distinct_and_stable() {
        let a = job_seed(0, "tsne", "clean-av", 3);
        let b = job_seed(0, "tsne", "clean-av", 4);
        let c = job_seed(0, "tsne", "video-only", 3);
        let d = job_seed(0, "probe", "clean-av", 3);
        let e = job_seed(1, "tsne", "clean-av", 3);
        let set: std::collections::BTreeSet<u64> = [a, b, c, d, e].into_iter().collect();
        assert_eq!(set.len(), 5, "stage, condition, layer, master all matter");
        assert_eq!(a, job_seed(0, "tsne", "clean-av", 3));
    }

    fn tiny_synth_corpus(dir: &Path) -> RunConfig {
        let spec = SynthSpec {
            dim: 16,
            layers: vec![0, 1],
            conditions: vec![
                SynthCondition {
                    name: "clean-av".to_string(),
                    separation: 4.0,
                    noise_std: 0.05,
                },
                SynthCondition {
                    name: "video-only".to_string(),
                    separation: 1.0,
                    noise_std: 0.4,
                },
            ],
            tokens_per_class: 8,
            frames_per_token: 3,
            tokens_per_utterance: 14,
            fps: 25.0,
            layer_scales: Vec::new(),
        };
        let map = lee_map();
        let corpus = generate_synthetic_corpus(&spec, &map, 11).unwrap();
        write_corpus(&corpus, dir).unwrap();
        RunConfig {
            corpus: dir.join("manifest.json"),
            alignment: dir.join("alignment.csv"),
            layers: vec![0, 1],
            conditions: vec!["clean-av".to_string(), "video-only".to_string()],
            out: Some(dir.join("out")),
            ..RunConfig::default()
        }
    }

    #[test]
    fn build_features_writes_cache_and_manifest() {
        let dir = tempdir().unwrap();
        let cfg = tiny_synth_corpus(dir.path());
        let manifest = cmd_build_features(cfg.clone()).unwrap();
        assert_eq!(manifest.outputs, vec![FEATURE_CACHE.to_string()]);
        assert_eq!(manifest.skip_counts["skipped_segments"], 0);
        assert_eq!(manifest.input_digests.len(), 2, "corpus + alignment");
        assert!(manifest.failures.is_empty());

        let cache = fs::read_to_string(dir.path().join("out").join(FEATURE_CACHE)).unwrap();
        let ds = read_feature_csv(&cache).unwrap();
        // 14 classes × 8 tokens × 2 conditions × 2 layers.
        assert_eq!(ds.records.len(), 14 * 8 * 2 * 2);

        let manifest_path = RunManifest::path(&dir.path().join("out"), "build-features");
        let parsed: RunManifest =
            serde_json::from_str(&fs::read_to_string(manifest_path).unwrap()).unwrap();
        assert_eq!(parsed.subcommand, "build-features");
        assert_eq!(parsed.tool_version, TOOL_VERSION);

        // Rerunning reproduces the cache byte for byte.
        cmd_build_features(cfg).unwrap();
        let again = fs::read_to_string(dir.path().join("out").join(FEATURE_CACHE)).unwrap();
        assert_eq!(cache, again);
    }

    #[test]
    fn build_features_rejects_a_condition_missing_from_the_corpus() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_synth_corpus(dir.path());
        cfg.conditions = vec!["clean-av".to_string(), "noisy-av".to_string()];
        let err = cmd_build_features(cfg).unwrap_err();
        assert!(err.to_string().contains("noisy-av"), "{err:#}");
    }

    #[test]
    fn tsne_requires_the_feature_cache() {
        let dir = tempdir().unwrap();
        let cfg = tiny_synth_corpus(dir.path());
        let err = cmd_tsne(cfg, 1).unwrap_err();
        assert!(format!("{err:#}").contains("build-features"), "{err:#}");
    }

    #[test]
    fn probe_sweep_emits_reports_logs_models_and_curves() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_synth_corpus(dir.path());
        cfg.probe.max_epochs = 3;
        cfg.probe.hidden_units = 8;
        cfg.probe.batch_size = 32;
        cfg.probe.val_fraction = 0.25;
        cmd_build_features(cfg.clone()).unwrap();
        let manifest = cmd_probe_sweep(cfg, 1).unwrap();
        assert!(manifest.failures.is_empty());

        // 2 conditions × 2 layers jobs, 3 files each, plus the sweep set.
        let mut expected: Vec<String> = Vec::new();
        for c in ["clean-av", "video-only"] {
            for l in [0, 1] {
                expected.push(format!("eval_report_{c}_{l}.json"));
                expected.push(format!("train_log_{c}_{l}.csv"));
                expected.push(format!("probe_{c}_{l}.model"));
            }
        }
        expected.extend(
            [
                "f1_by_layer.csv",
                "curves_accuracy.svg",
                "curves_accuracy.csv",
                "curves_f1.svg",
                "curves_f1.csv",
            ]
            .map(String::from),
        );
        let mut got = manifest.outputs.clone();
        let mut want = expected.clone();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        for file in &manifest.outputs {
            assert!(
                dir.path().join("out").join(file).exists(),
                "{file} listed but missing"
            );
        }
        // The manifest enumerates exactly the produced files (beyond itself
        // and the pre-existing cache).
        let mut on_disk: Vec<String> = fs::read_dir(dir.path().join("out"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
            .filter(|n| {
                n != FEATURE_CACHE && !n.starts_with("run_manifest_") && !n.ends_with(".tmp")
            })
            .collect();
        on_disk.sort();
        assert_eq!(on_disk, want);
    }

    #[test]
    fn probe_sweep_flushes_partial_results_when_a_job_fails() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_synth_corpus(dir.path());
        cfg.probe.max_epochs = 2;
        cfg.probe.hidden_units = 4;
        cfg.probe.val_fraction = 0.25;
        cmd_build_features(cfg.clone()).unwrap();
        // Request a layer the cache does not have: that job fails, the rest run.
        cfg.layers = vec![0, 9];
        let err = cmd_probe_sweep(cfg, 1).unwrap_err();
        assert!(err.to_string().contains("layer 9"), "{err:#}");
        let out = dir.path().join("out");
        assert!(out.join("eval_report_clean-av_0.json").exists());
        assert!(out.join("FAILED_clean-av_9.txt").exists());
        let manifest: RunManifest = serde_json::from_str(
            &fs::read_to_string(RunManifest::path(&out, "probe-sweep")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.failures.len(), 2, "one per condition");
    }

    #[test]
    fn report_emits_histograms_per_pair() {
        let dir = tempdir().unwrap();
        let cfg = tiny_synth_corpus(dir.path());
        cmd_build_features(cfg.clone()).unwrap();
        let manifest = cmd_report(cfg).unwrap();
        for c in ["clean-av", "video-only"] {
            for l in [0, 1] {
                assert!(manifest
                    .outputs
                    .contains(&format!("histogram_{c}_{l}.svg")));
                assert!(manifest
                    .outputs
                    .contains(&format!("histogram_{c}_{l}.csv")));
            }
        }
        // No eval reports on disk yet, so no curves.
        assert!(!manifest.outputs.iter().any(|f| f.starts_with("curves_")));
    }

    #[test]
    fn validate_accepts_the_synth_corpus_and_rejects_corruption() {
        let dir = tempdir().unwrap();
        let cfg = tiny_synth_corpus(dir.path());
        cmd_validate(cfg.clone()).unwrap();

        // Truncate one container: validate must fail with its path.
        let broken = dir
            .path()
            .join("emb/clean-av/layer0/utt0000.emb1");
        let bytes = fs::read(&broken).unwrap();
        fs::write(&broken, &bytes[..bytes.len() / 2]).unwrap();
        let err = cmd_validate(cfg).unwrap_err();
        assert!(format!("{err:#}").contains("utt0000"), "{err:#}");
    }

    #[test]
    fn synth_writes_corpus_and_its_manifest() {
        let dir = tempdir().unwrap();
        let spec_path = dir.path().join("spec.json");
        fs::write(
            &spec_path,
            r#"{
                "dim": 16,
                "layers": [0],
                "conditions": [{"name": "clean-av", "separation": 2.0, "noise_std": 0.1}],
                "tokens_per_class": 2
            }"#,
        )
        .unwrap();
        let out = dir.path().join("corpus");
        let manifest = cmd_synth(&spec_path, "lee", 5, &out).unwrap();
        assert!(out.join("manifest.json").exists());
        assert!(out.join("alignment.csv").exists());
        assert!(manifest.outputs.contains(&"manifest.json".to_string()));
        assert!(manifest.outputs.iter().any(|f| f.ends_with(".emb1")));
        let listed_emb = manifest.outputs.iter().filter(|f| f.ends_with(".emb1")).count();
        // 28 tokens / 14 per utterance = 2 utterances × 1 condition × 1 layer.
        assert_eq!(listed_emb, 2);
        // The corpus is immediately consumable.
        let cfg = RunConfig {
            corpus: out.join("manifest.json"),
            alignment: out.join("alignment.csv"),
            layers: vec![0],
            out: Some(dir.path().join("out")),
            ..RunConfig::default()
        };
        let built = cmd_build_features(cfg).unwrap();
        assert!(built.failures.is_empty());
    }
}
