//! Run-directory files: metrics CSV, JSON-lines log, embeddings and manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::augment::AugmentationPipeline;
use crate::datasets::{ImageDims, MultiClusteringDataset};
use crate::error::{Error, Result};
use crate::metrics::MatchReport;
use crate::numerics::Tensor;
use crate::trainer::{hex, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.ddmc";
pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn embeddings_file(k: usize) -> String {
    format!("embeddings_{k}.csv")
}

pub(crate) fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    /// `grid` for a (clustering, representation) cell, `best` for the
    /// representation that matches a clustering best.
    pub kind: String,
    pub clustering: String,
    pub representation: usize,
    pub nmi: f64,
    pub ri: f64,
}

pub(crate) fn best_rows(names: &[&str], report: &MatchReport) -> Vec<MetricRow> {
    names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let k = report.best[m];
            let s = report.grid[k][m];
            MetricRow {
                kind: "best".into(),
                clustering: name.to_string(),
                representation: k,
                nmi: s.nmi,
                ri: s.ri,
            }
        })
        .collect()
}

fn all_rows(names: &[&str], report: &MatchReport) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (m, name) in names.iter().enumerate() {
        for (k, cells) in report.grid.iter().enumerate() {
            let s = cells[m];
            rows.push(MetricRow {
                kind: "grid".into(),
                clustering: name.to_string(),
                representation: k,
                nmi: s.nmi,
                ri: s.ri,
            });
        }
    }
    rows.extend(best_rows(names, report));
    rows
}

pub fn write_metrics_csv(path: &Path, names: &[&str], report: &MatchReport) -> Result<()> {
    let mut s = String::from("kind,clustering,representation,nmi,ri\n");
    for r in all_rows(names, report) {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.kind, r.clustering, r.representation, r.nmi, r.ri
        ));
    }
    fs::write(path, s).map_err(io_err(path))
}

/// The `best` rows of a metrics file.
pub fn read_best_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let bad = || Error::Parse {
            offset: i,
            msg: format!("{}: malformed metrics line {line:?}", path.display()),
        };
        let f: Vec<&str> = line.split(',').collect();
        if i == 0 || f.first() != Some(&"best") {
            continue;
        }
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push(MetricRow {
            kind: f[0].into(),
            clustering: f[1].into(),
            representation: f[2].parse().map_err(|_| bad())?,
            nmi: f[3].parse().map_err(|_| bad())?,
            ri: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// `N` rows of latent means, one column per latent dimension.
pub fn write_embeddings(path: &Path, mu: &Tensor) -> Result<()> {
    let (n, dz) = mu.dims2()?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let header: Vec<String> = std::iter::once("sample".to_string())
        .chain((0..dz).map(|j| format!("z{j}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io_err(path))?;
    for i in 0..n {
        let vals: Vec<String> = mu.row(i).iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{i},{}", vals.join(",")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Streams one JSON object per line, remembering the first write failure so
/// it can be used from inside a training callback.
pub(crate) struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
    failed: Option<std::io::Error>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            failed: None,
        })
    }

    pub fn push(&mut self, record: &impl Serialize) {
        if self.failed.is_some() {
            return;
        }
        let res = serde_json::to_writer(&mut self.out, record)
            .map_err(std::io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = res {
            self.failed = Some(e);
        }
    }

    pub fn finish(mut self) -> Result<()> {
        match self.failed.take() {
            Some(e) => Err(Error::io(&self.path, e)),
            None => self.out.flush().map_err(|e| Error::io(&self.path, e)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub num_samples: usize,
    pub dims: ImageDims,
    pub clusterings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub seed: u64,
    pub aug_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactPaths {
    pub checkpoint: String,
    pub log: String,
    pub metrics: String,
    pub manifest: String,
}

/// Everything needed to understand and repeat a training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_text: String,
    pub config_hash: String,
    /// Arguments that repeat this run, starting with the subcommand.
    pub rerun: Vec<String>,
    pub dataset: DatasetRecord,
    pub pipelines: Vec<String>,
    pub pipeline_specs: Vec<AugmentationPipeline>,
    pub seeds: Seeds,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub checkpoint_sha256: String,
    pub final_metrics: Vec<MetricRow>,
    pub metrics: Vec<MetricRow>,
    /// File names relative to the run directory.
    pub artifacts: ArtifactPaths,
}

impl RunManifest {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        data_path: &Path,
        ds: &MultiClusteringDataset,
        ds_bytes: &[u8],
        config: &RunConfig,
        pipelines: &[AugmentationPipeline],
        checkpoint_sha256: String,
        names: &[&str],
        report: &MatchReport,
        epochs_run: usize,
        stopped_early: bool,
        started_unix: f64,
    ) -> Self {
        let config_text = config.to_text();
        let mut rerun: Vec<String> = vec!["train".into(), "--data".into(), data_path.display().to_string()];
        for line in config_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                rerun.push("--set".into());
                rerun.push(format!("{}={}", k.trim(), v.trim()));
            }
        }
        Self {
            config: config.clone(),
            config_hash: config.hash_hex(),
            config_text,
            rerun,
            dataset: DatasetRecord {
                path: data_path.to_path_buf(),
                sha256: hex(&Sha256::digest(ds_bytes)),
                num_samples: ds.num_samples(),
                dims: ds.dims(),
                clusterings: names.iter().map(|s| s.to_string()).collect(),
            },
            pipelines: pipelines.iter().map(AugmentationPipeline::describe).collect(),
            pipeline_specs: pipelines.to_vec(),
            seeds: Seeds {
                seed: config.seed,
                aug_seed: config.aug_seed,
            },
            started_unix,
            finished_unix: unix_now(),
            epochs_run,
            stopped_early,
            checkpoint_sha256,
            final_metrics: best_rows(names, report),
            metrics: all_rows(names, report),
            artifacts: ArtifactPaths {
                checkpoint: CHECKPOINT_FILE.into(),
                log: LOG_FILE.into(),
                metrics: METRICS_FILE.into(),
                manifest: MANIFEST_FILE.into(),
            },
        }
    }

    /// Writes `manifest.json` into `dir` after checking that every other
    /// artifact it names is present.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for name in [&self.artifacts.checkpoint, &self.artifacts.log, &self.artifacts.metrics] {
            if !dir.join(name).is_file() {
                return Err(Error::Contract(format!("manifest names missing artifact {name}")));
            }
        }
        let path = dir.join(&self.artifacts.manifest);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Contract(format!("manifest: {e}")))?;
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }
}
