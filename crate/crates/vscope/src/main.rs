//! `vscope` — probe and visualize viseme structure in speech embeddings.
//!
//! Thin argument layer over [`vscope::run`]: flags are parsed here, merged
//! onto an optional JSON config file (flag > file > default), and handed to
//! the command functions. Every handled error exits with code 2; the full
//! context chain goes to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use vscope::run::{
    cmd_build_features, cmd_probe_sweep, cmd_report, cmd_synth, cmd_tsne, cmd_validate, RunConfig,
};
use vscope::tsne::{InitScheme, Metric};

#[derive(Parser)]
#[command(
    name = "vscope",
    version,
    about = "Probe and visualize viseme structure in audio-visual speech embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pool corpus embeddings into the per-token feature cache.
    BuildFeatures(RunArgs),
    /// Embed (condition, layer) slices into 2-D and emit scatter figures.
    Tsne(RunArgs),
    /// Train one probe per (condition, layer) and chart the sweep.
    ProbeSweep(RunArgs),
    /// Re-emit figures from the feature cache and existing eval reports.
    Report(RunArgs),
    /// Generate a synthetic corpus from a spec file.
    Synth(SynthArgs),
    /// Check input file formats; produces no artifacts.
    Validate(RunArgs),
}

/// Shared flags: a config file plus long-form overrides for every field.
#[derive(Args)]
struct RunArgs {
    /// JSON run-configuration file; flags below override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Corpus manifest path.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Alignment CSV path.
    #[arg(long, value_name = "PATH")]
    alignment: Option<PathBuf>,
    /// Builtin viseme map name ("lee") or a map file path.
    #[arg(long = "viseme-map", value_name = "NAME|PATH")]
    viseme_map: Option<String>,
    /// Comma-separated layer list.
    #[arg(long, value_delimiter = ',', value_name = "L,L,...")]
    layers: Option<Vec<u32>>,
    /// Comma-separated condition list; defaults to all in the corpus.
    #[arg(long, value_delimiter = ',', value_name = "C,C,...")]
    conditions: Option<Vec<String>>,
    /// Balanced subsample cap per viseme class (t-SNE input).
    #[arg(long = "per-class", value_name = "N")]
    per_class: Option<usize>,
    /// Master seed; stages derive named sub-seeds from it.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (falls back to $VSCOPE_OUT, then ./out).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for (condition, layer) jobs; 1 is bitwise-reproducible.
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,

    #[arg(long = "tsne.perplexity", value_name = "REAL")]
    tsne_perplexity: Option<f64>,
    #[arg(long = "tsne.early_exaggeration", value_name = "REAL")]
    tsne_early_exaggeration: Option<f64>,
    #[arg(long = "tsne.exaggeration_iters", value_name = "N")]
    tsne_exaggeration_iters: Option<usize>,
    #[arg(long = "tsne.n_iter", value_name = "N")]
    tsne_n_iter: Option<usize>,
    #[arg(long = "tsne.learning_rate", value_name = "REAL")]
    tsne_learning_rate: Option<f64>,
    #[arg(long = "tsne.theta", value_name = "REAL")]
    tsne_theta: Option<f64>,
    /// Distance metric: cosine or euclidean.
    #[arg(long = "tsne.metric", value_name = "NAME")]
    tsne_metric: Option<String>,
    /// Initialization: pca or random.
    #[arg(long = "tsne.init", value_name = "NAME")]
    tsne_init: Option<String>,
    #[arg(long = "tsne.momentum_early", value_name = "REAL")]
    tsne_momentum_early: Option<f64>,
    #[arg(long = "tsne.momentum_late", value_name = "REAL")]
    tsne_momentum_late: Option<f64>,
    #[arg(long = "tsne.momentum_switch_iter", value_name = "N")]
    tsne_momentum_switch_iter: Option<usize>,
    #[arg(long = "tsne.restarts", value_name = "N")]
    tsne_restarts: Option<usize>,
    #[arg(long = "tsne.min_trust", value_name = "REAL")]
    tsne_min_trust: Option<f64>,
    #[arg(long = "tsne.kl_every", value_name = "N")]
    tsne_kl_every: Option<usize>,

    #[arg(long = "probe.input_dim", value_name = "N")]
    probe_input_dim: Option<usize>,
    #[arg(long = "probe.hidden_units", value_name = "N")]
    probe_hidden_units: Option<usize>,
    #[arg(long = "probe.classes", value_name = "N")]
    probe_classes: Option<usize>,
    #[arg(long = "probe.max_epochs", value_name = "N")]
    probe_max_epochs: Option<usize>,
    #[arg(long = "probe.learning_rate", value_name = "REAL")]
    probe_learning_rate: Option<f64>,
    #[arg(long = "probe.batch_size", value_name = "N")]
    probe_batch_size: Option<usize>,
    #[arg(long = "probe.patience", value_name = "N")]
    probe_patience: Option<usize>,
    #[arg(long = "probe.val_fraction", value_name = "REAL")]
    probe_val_fraction: Option<f64>,
    #[arg(long = "probe.adam_beta1", value_name = "REAL")]
    probe_adam_beta1: Option<f64>,
    #[arg(long = "probe.adam_beta2", value_name = "REAL")]
    probe_adam_beta2: Option<f64>,
    #[arg(long = "probe.adam_eps", value_name = "REAL")]
    probe_adam_eps: Option<f64>,
    /// Standardize inputs on train statistics: true or false.
    #[arg(long = "probe.standardize", value_name = "BOOL")]
    probe_standardize: Option<bool>,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic corpus spec (JSON).
    #[arg(long, value_name = "PATH")]
    spec: PathBuf,
    /// Viseme map the corpus classes come from.
    #[arg(long = "viseme-map", value_name = "NAME|PATH", default_value = "lee")]
    viseme_map: String,
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Output directory (falls back to $VSCOPE_OUT, then ./out).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.corpus {
            cfg.corpus = v.clone();
        }
        if let Some(v) = &self.alignment {
            cfg.alignment = v.clone();
        }
        if let Some(v) = &self.viseme_map {
            cfg.viseme_map = v.clone();
        }
        if let Some(v) = &self.layers {
            cfg.layers = v.clone();
        }
        if let Some(v) = &self.conditions {
            cfg.conditions = v.clone();
        }
        if let Some(v) = self.per_class {
            cfg.per_class = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }

        if let Some(v) = self.tsne_perplexity {
            cfg.tsne.perplexity = v;
        }
        if let Some(v) = self.tsne_early_exaggeration {
            cfg.tsne.early_exaggeration = v;
        }
        if let Some(v) = self.tsne_exaggeration_iters {
            cfg.tsne.exaggeration_iters = v;
        }
        if let Some(v) = self.tsne_n_iter {
            cfg.tsne.n_iter = v;
        }
        if let Some(v) = self.tsne_learning_rate {
            cfg.tsne.learning_rate = v;
        }
        if let Some(v) = self.tsne_theta {
            cfg.tsne.theta = v;
        }
        if let Some(v) = &self.tsne_metric {
            cfg.tsne.metric = match v.as_str() {
                "cosine" => Metric::Cosine,
                "euclidean" => Metric::Euclidean,
                other => bail!("unknown metric {other:?} (expected cosine or euclidean)"),
            };
        }
        if let Some(v) = &self.tsne_init {
            cfg.tsne.init = match v.as_str() {
                "pca" => InitScheme::Pca,
                "random" => InitScheme::Random,
                other => bail!("unknown init {other:?} (expected pca or random)"),
            };
        }
        if let Some(v) = self.tsne_momentum_early {
            cfg.tsne.momentum_early = v;
        }
        if let Some(v) = self.tsne_momentum_late {
            cfg.tsne.momentum_late = v;
        }
        if let Some(v) = self.tsne_momentum_switch_iter {
            cfg.tsne.momentum_switch_iter = v;
        }
        if let Some(v) = self.tsne_restarts {
            cfg.tsne.restarts = v;
        }
        if let Some(v) = self.tsne_min_trust {
            cfg.tsne.min_trust = v;
        }
        if let Some(v) = self.tsne_kl_every {
            cfg.tsne.kl_every = v;
        }

        if let Some(v) = self.probe_input_dim {
            cfg.probe.input_dim = v;
        }
        if let Some(v) = self.probe_hidden_units {
            cfg.probe.hidden_units = v;
        }
        if let Some(v) = self.probe_classes {
            cfg.probe.classes = v;
        }
        if let Some(v) = self.probe_max_epochs {
            cfg.probe.max_epochs = v;
        }
        if let Some(v) = self.probe_learning_rate {
            cfg.probe.learning_rate = v;
        }
        if let Some(v) = self.probe_batch_size {
            cfg.probe.batch_size = v;
        }
        if let Some(v) = self.probe_patience {
            cfg.probe.patience = v;
        }
        if let Some(v) = self.probe_val_fraction {
            cfg.probe.val_fraction = v;
        }
        if let Some(v) = self.probe_adam_beta1 {
            cfg.probe.adam_beta1 = v;
        }
        if let Some(v) = self.probe_adam_beta2 {
            cfg.probe.adam_beta2 = v;
        }
        if let Some(v) = self.probe_adam_eps {
            cfg.probe.adam_eps = v;
        }
        if let Some(v) = self.probe_standardize {
            cfg.probe.standardize = v;
        }
        Ok(cfg)
    }
}

impl SynthArgs {
    fn out_dir(&self) -> PathBuf {
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
}

fn dispatch(cli: Cli) -> Result<()> {
    let manifest = match cli.command {
        Command::BuildFeatures(args) => cmd_build_features(args.resolve()?)?,
        Command::Tsne(args) => cmd_tsne(args.resolve()?, args.jobs)?,
        Command::ProbeSweep(args) => cmd_probe_sweep(args.resolve()?, args.jobs)?,
        Command::Report(args) => cmd_report(args.resolve()?)?,
        Command::Synth(args) => cmd_synth(&args.spec, &args.viseme_map, args.seed, &args.out_dir())?,
        Command::Validate(args) => cmd_validate(args.resolve()?)?,
    };
    println!(
        "{}: {} outputs ({} stages) — see run_manifest_{}.json",
        manifest.subcommand,
        manifest.outputs.len(),
        manifest.stage_seconds.len(),
        manifest.subcommand
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
