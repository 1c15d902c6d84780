//! Grid sweeps over K and T, in-process or as child processes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use serde::Serialize;

use super::artifacts::{best_rows, read_best_rows, CHECKPOINT_FILE, METRICS_FILE};
use super::{cmd_eval, cmd_train, EvalArgs, SweepArgs, TrainArgs};
use crate::error::{Error, Result};

pub const SWEEP_FILE: &str = "sweep.csv";

/// Best-match scores of one clustering at one grid point, either as recorded
/// at the end of training or as recomputed by `eval` from the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub t: usize,
    pub clustering: String,
    /// `train` or `eval`.
    pub stage: String,
    pub nmi: f64,
    pub ri: f64,
}

fn point_dir(out: &Path, k: usize, t: usize) -> PathBuf {
    out.join(format!("k{k}_t{t}"))
}

const EVAL_DIR: &str = "eval";

fn stage_rank(stage: &str) -> u8 {
    u8::from(stage != "train")
}

fn grid(args: &SweepArgs) -> Result<Vec<(usize, usize)>> {
    let mut ks = args.k_values.clone();
    let mut ts = args.t_values.clone();
    if ks.is_empty() || ts.is_empty() {
        return Err(Error::config("sweep needs at least one K and one T"));
    }
    if let Some(v) = ks.iter().chain(&ts).find(|&&v| v < 2) {
        return Err(Error::config(format!("sweep values must be at least 2, got {v}")));
    }
    ks.sort_unstable();
    ks.dedup();
    ts.sort_unstable();
    ts.dedup();
    Ok(ks.iter().flat_map(|&k| ts.iter().map(move |&t| (k, t))).collect())
}

fn spawn(args: &SweepArgs, exe: &Path, k: usize, t: usize) -> Result<Child> {
    Command::new(exe)
        .arg("train")
        .arg("--data")
        .arg(&args.data)
        .arg("--out")
        .arg(point_dir(&args.out, k, t))
        .args(["--k", &k.to_string(), "--t", &t.to_string(), "--quiet"])
        .args(args.config.to_flags())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::io(exe, e))
}

fn run_parallel(args: &SweepArgs, points: &[(usize, usize)]) -> Result<()> {
    let exe = match &args.worker {
        Some(p) => p.clone(),
        None => std::env::current_exe().map_err(|e| Error::io("current executable", e))?,
    };
    let width = std::thread::available_parallelism().map_or(1, |n| n.get());
    for chunk in points.chunks(width) {
        let children = chunk
            .iter()
            .map(|&(k, t)| spawn(args, &exe, k, t).map(|c| (k, t, c)))
            .collect::<Result<Vec<_>>>()?;
        for (k, t, child) in children {
            let out = child.wait_with_output().map_err(|e| Error::io(&exe, e))?;
            if !out.status.success() {
                let msg = String::from_utf8_lossy(&out.stderr).trim().to_string();
                return Err(match out.status.code() {
                    Some(super::EXIT_NUMERIC) => Error::NonFinite {
                        term: format!("sweep point K={k} T={t}: {msg}"),
                        epoch: 0,
                    },
                    code => Error::Config(format!("sweep point K={k} T={t} failed ({code:?}): {msg}")),
                });
            }
        }
    }
    Ok(())
}

/// Trains and evaluates every grid point under `out/k{K}_t{T}` and writes
/// `out/sweep.csv` sorted by (K, T, clustering), train rows before eval rows.
pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    let points = grid(args)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    if args.parallel {
        run_parallel(args, &points)?;
    } else {
        for &(k, t) in &points {
            cmd_train(&TrainArgs {
                data: args.data.clone(),
                out: point_dir(&args.out, k, t),
                k: Some(k),
                t: Some(t),
                config: args.config.clone(),
                quiet: true,
            })?;
        }
    }
    let (ds, _) = super::read_dataset(&args.data)?;
    let names = ds.clustering_names();
    let mut rows = Vec::new();
    for &(k, t) in &points {
        let dir = point_dir(&args.out, k, t);
        let row = |stage: &str, r: super::MetricRow| SweepRow {
            k,
            t,
            clustering: r.clustering,
            stage: stage.into(),
            nmi: r.nmi,
            ri: r.ri,
        };
        rows.extend(
            read_best_rows(&dir.join(METRICS_FILE))?
                .into_iter()
                .map(|r| row("train", r)),
        );
        let report = cmd_eval(&EvalArgs {
            checkpoint: dir.join(CHECKPOINT_FILE),
            data: args.data.clone(),
            out: dir.join(EVAL_DIR),
            quiet: true,
        })?;
        rows.extend(best_rows(&names, &report).into_iter().map(|r| row("eval", r)));
    }
    rows.sort_by(|a, b| {
        (a.k, a.t, &a.clustering, stage_rank(&a.stage)).cmp(&(b.k, b.t, &b.clustering, stage_rank(&b.stage)))
    });
    let mut csv = String::from("k,t,clustering,stage,nmi,ri\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.k, r.t, r.clustering, r.stage, r.nmi, r.ri
        ));
        println!(
            "K={} T={} {:<12} {:<5} NMI {:.4}  RI {:.4}",
            r.k, r.t, r.clustering, r.stage, r.nmi, r.ri
        );
    }
    let path = args.out.join(SWEEP_FILE);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
