//! The `ddmc` command line: `gen`, `train`, `eval` and `sweep`.
//!
//! Exit codes: 0 on success, 2 for usage and input errors, 3 when training
//! hits a non-finite value.

mod artifacts;
mod sweep;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::datasets::{generate, save_dataset, GeneratorKind, GeneratorSpec, MultiClusteringDataset};
use crate::error::{Error, Result};
use crate::metrics::{match_report, MatchReport, Partition};
use crate::trainer::{infer, train_with, Checkpoint, ClusterState, RunConfig};

pub use artifacts::{
    embeddings_file, read_best_rows, write_embeddings, write_metrics_csv, MetricRow, RunManifest, CHECKPOINT_FILE,
    LOG_FILE, MANIFEST_FILE, METRICS_FILE,
};
pub use sweep::{cmd_sweep, SweepRow, SWEEP_FILE};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ddmc", version, about = "Deep multiple clustering with dual disentanglement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-clustering dataset.
    Gen(GenArgs),
    /// Train a model and write checkpoint, log, metrics and manifest.
    Train(TrainArgs),
    /// Re-score a checkpoint against a dataset and export embeddings.
    Eval(EvalArgs),
    /// Train over a grid of K and T values.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Stickfig,
    #[value(alias = "colored_shapes")]
    ColoredShapes,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of shapes (colored shapes only).
    #[arg(long, default_value_t = 2)]
    pub shapes: usize,
    /// Number of colors (colored shapes only).
    #[arg(long, default_value_t = 2)]
    pub colors: usize,
    #[arg(long)]
    pub samples_per_cell: Option<usize>,
    /// Half-width of the uniform pixel noise.
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Settings shared by `train` and `sweep`. Later sources win: defaults,
/// then `--config`, then `--set`, then the named flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Any config key, as `KEY=VALUE`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    /// Builds the run config. `m` defaults to the dataset's clustering count.
    pub fn resolve(&self, m: usize, k: Option<usize>, t: Option<usize>) -> Result<RunConfig> {
        let mut cfg = RunConfig {
            m,
            ..RunConfig::default()
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            cfg.set(key, value)?;
        }
        if let Some(v) = k {
            cfg.k = v;
        }
        if let Some(v) = t {
            cfg.t = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The same settings as command-line flags, for child processes.
    pub fn to_flags(&self) -> Vec<OsString> {
        let mut out: Vec<OsString> = Vec::new();
        let mut flag = |name: &str, value: OsString| {
            out.push(format!("--{name}").into());
            out.push(value);
        };
        if let Some(p) = &self.config {
            flag("config", p.clone().into_os_string());
        }
        for s in &self.set {
            flag("set", s.into());
        }
        if let Some(v) = self.seed {
            flag("seed", v.to_string().into());
        }
        if let Some(v) = self.epochs {
            flag("epochs", v.to_string().into());
        }
        if let Some(v) = self.tau {
            flag("tau", v.to_string().into());
        }
        if let Some(v) = self.lr {
            flag("lr", v.to_string().into());
        }
        if let Some(v) = self.delta {
            flag("delta", v.to_string().into());
        }
        out
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset file written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Do not print the best-match summary.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Values of K, comma separated.
    #[arg(long = "k-values", value_delimiter = ',', default_value = "2")]
    pub k_values: Vec<usize>,
    /// Values of T, comma separated.
    #[arg(long = "t-values", value_delimiter = ',', default_value = "3")]
    pub t_values: Vec<usize>,
    /// Run grid points as concurrent child processes.
    #[arg(long)]
    pub parallel: bool,
    /// Executable used for child processes; defaults to this one.
    #[arg(long, hide = true)]
    pub worker: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<MultiClusteringDataset> {
    let mut spec = match args.kind {
        KindArg::Stickfig => GeneratorSpec::stickfig(args.seed),
        KindArg::ColoredShapes => GeneratorSpec::colored_shapes(args.shapes, args.colors, args.seed),
    };
    if let Some(n) = args.samples_per_cell {
        spec = spec.with_samples_per_cell(n);
    }
    if let Some(noise) = args.noise {
        spec = spec.with_noise(noise);
    }
    if spec.kind == GeneratorKind::Stickfig && (args.shapes != 2 || args.colors != 2) {
        return Err(Error::config("--shapes and --colors apply to colored shapes only"));
    }
    let ds = generate(&spec)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_dataset(&ds, &args.out)?;
    let sizes: Vec<usize> = ds.labelings().iter().map(|l| l.num_clusters).collect();
    println!(
        "N={} d={} M={} T_m={:?} -> {}",
        ds.num_samples(),
        ds.dim(),
        ds.num_clusterings(),
        sizes,
        args.out.display()
    );
    Ok(ds)
}

fn read_dataset(path: &Path) -> Result<(MultiClusteringDataset, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds = MultiClusteringDataset::from_bytes(&bytes)?;
    Ok((ds, bytes))
}

fn truth(ds: &MultiClusteringDataset) -> Result<Vec<Partition>> {
    ds.labelings()
        .iter()
        .map(|l| Partition::new(l.labels.clone(), l.num_clusters))
        .collect()
}

fn score(ds: &MultiClusteringDataset, state: &ClusterState, t: usize) -> Result<MatchReport> {
    let predicted = state
        .assignments
        .iter()
        .map(|a| Partition::new(a.labels.clone(), t))
        .collect::<Result<Vec<_>>>()?;
    match_report(&predicted, &truth(ds)?)
}

/// What `train` produced, for callers that want more than the files.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub report: MatchReport,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub manifest: RunManifest,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let started = artifacts::unix_now();
    let (ds, ds_bytes) = read_dataset(&args.data)?;
    let config = args.config.resolve(ds.num_clusterings(), args.k, args.t)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let log_path = args.out.join(artifacts::LOG_FILE);
    let mut log = artifacts::JsonLines::create(&log_path)?;
    let quiet = args.quiet;
    let trained = train_with(&config, &ds, |rec| {
        log.push(rec);
        if !quiet && rec.stopping.is_some() {
            eprintln!(
                "epoch {:>4}  loss {:.4}  changed {:.4}",
                rec.epoch,
                rec.total,
                rec.stopping.unwrap_or(f64::NAN)
            );
        }
    });
    log.finish()?;
    let trained = trained?;

    // with no M-step yet, score the way `eval` will: k-means on the means
    let state = match &trained.clusters {
        Some(c) => c.clone(),
        None => infer(&trained.params, None, &ds, &trained.pipelines, &config)?.0,
    };
    let report = score(&ds, &state, config.t)?;
    let names = ds.clustering_names();
    write_metrics_csv(&args.out.join(artifacts::METRICS_FILE), &names, &report)?;

    let checkpoint = trained.checkpoint(&config, ds.dims());
    let ck_bytes = checkpoint.to_bytes()?;
    let ck_path = args.out.join(artifacts::CHECKPOINT_FILE);
    fs::write(&ck_path, &ck_bytes).map_err(|e| Error::io(&ck_path, e))?;

    let manifest = RunManifest::new(
        &args.data,
        &ds,
        &ds_bytes,
        &config,
        &trained.pipelines,
        Checkpoint::digest_hex(&ck_bytes).unwrap_or_default(),
        &names,
        &report,
        trained.epochs_run,
        trained.stopped_early,
        started,
    );
    manifest.write(&args.out)?;
    for row in artifacts::best_rows(&names, &report) {
        println!(
            "{:<12} rep {}  NMI {:.4}  RI {:.4}",
            row.clustering, row.representation, row.nmi, row.ri
        );
    }
    Ok(TrainOutcome {
        config,
        report,
        epochs_run: trained.epochs_run,
        stopped_early: trained.stopped_early,
        manifest,
    })
}

/// Metrics and per-representation embeddings of a saved model.
pub fn cmd_eval(args: &EvalArgs) -> Result<MatchReport> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (ds, _) = read_dataset(&args.data)?;
    if checkpoint.dims != ds.dims() {
        let d = |x: crate::datasets::ImageDims| [x.height, x.width, x.channels];
        return Err(Error::dim("eval", &d(checkpoint.dims), &d(ds.dims())));
    }
    let frozen = checkpoint.centers.map(|centers| ClusterState {
        centers,
        assignments: Vec::new(),
        prev_assignments: None,
    });
    let (state, means) = infer(
        &checkpoint.params,
        frozen.as_ref(),
        &ds,
        &checkpoint.pipelines,
        &checkpoint.config,
    )?;
    let report = score(&ds, &state, checkpoint.config.t)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let names = ds.clustering_names();
    write_metrics_csv(&args.out.join(artifacts::METRICS_FILE), &names, &report)?;
    for (k, mu) in means.iter().enumerate() {
        write_embeddings(&args.out.join(artifacts::embeddings_file(k)), mu)?;
    }
    for row in artifacts::best_rows(&names, &report)
        .into_iter()
        .filter(|_| !args.quiet)
    {
        println!(
            "{:<12} rep {}  NMI {:.4}  RI {:.4}",
            row.clustering, row.representation, row.nmi, row.ri
        );
    }
    Ok(report)
}
