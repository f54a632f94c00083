//! Grid sweeps: one training run per (mask, ffn, seed) cell, cells spread
//! over worker threads, results written in grid order.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::Args;
use dagpredict::dag::{Dag, MaskVariant};
use dagpredict::model::FfnVariant;
use dagpredict::train::{fit, Prepared};
use serde::Deserialize;

use crate::{history_header, history_row, load_data, split_records, to_pairs, CmdResult, ConfigArgs, Failure, ResultExt};
use crate::config::RunConfig;

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// CSV with columns mask_variant, ffn_variant, seed.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Cell {
    pub mask_variant: MaskVariant,
    pub ffn_variant: FfnVariant,
    pub seed: u64,
}

pub fn read_grid(path: &Path) -> anyhow::Result<Vec<Cell>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading grid {}", path.display()))?;
    let cells = r
        .deserialize()
        .enumerate()
        .map(|(i, c)| c.with_context(|| format!("grid row {}", i + 1)))
        .collect::<anyhow::Result<Vec<Cell>>>()?;
    if cells.is_empty() {
        bail!("grid {} has no cells", path.display());
    }
    Ok(cells)
}

struct CellOutcome {
    val_kt: Option<f64>,
    val_kt_ema: Option<f64>,
    train_mse: f64,
    history: Vec<[String; 5]>,
}

fn run_cell(
    cfg: &RunConfig,
    cell: &Cell,
    train: &[(Dag, f64)],
    val: &[(Dag, f64)],
) -> anyhow::Result<CellOutcome> {
    let mut cfg = cfg.clone();
    cfg.model.mask_variant = cell.mask_variant;
    cfg.model.ffn_variant = cell.ffn_variant;
    cfg.train.seed = cell.seed;
    let train = Prepared::new(train, &cfg.model)?;
    let val = Prepared::new(val, &cfg.model)?;
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let out = fit(&cfg.model, &train, &val, &cfg.train, &mut |r| history.push(history_row(r)))?;
    let last = out.history.last();
    Ok(CellOutcome {
        val_kt: last.and_then(|r| r.val_metric),
        val_kt_ema: last.and_then(|r| r.val_metric_ema),
        train_mse: last.map_or(f64::NAN, |r| r.train_mse),
        history,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn run(a: AblateArgs) -> CmdResult {
    let cfg = a.config.load().usage()?;
    let cells = read_grid(&a.grid).usage()?;
    if a.jobs == Some(0) {
        return Err(Failure::Usage(anyhow!("--jobs must be positive")));
    }
    let records = load_data(&a.data)?;
    let split = split_records(&records, &cfg)?;
    let (train, val) = (to_pairs(&split.train), to_pairs(&split.val));
    fs::create_dir_all(a.out.join("cells")).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), format!("# data = {}\n{}", a.data.display(), cfg.to_toml()?))?;

    let jobs = a.jobs.unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get())).min(cells.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<anyhow::Result<CellOutcome>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let started = Instant::now();
    thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let t0 = Instant::now();
                let r = catch_unwind(AssertUnwindSafe(|| run_cell(&cfg, cell, &train, &val)))
                    .unwrap_or_else(|p| {
                        let msg = p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panic".into());
                        Err(anyhow!("cell panicked: {msg}"))
                    });
                if !a.quiet {
                    let kt = r.as_ref().ok().and_then(|o| o.val_kt).map_or("-".into(), |v| format!("{v:.4}"));
                    eprintln!(
                        "cell {i}: {} + {} seed {} -> val_kt {kt} ({:.1}s)",
                        cell.mask_variant,
                        cell.ffn_variant,
                        cell.seed,
                        t0.elapsed().as_secs_f64()
                    );
                }
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let results: Vec<anyhow::Result<CellOutcome>> =
        results.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every cell ran")).collect();

    let mut table = csv::Writer::from_path(a.out.join("ablation.csv")).map_err(anyhow::Error::from)?;
    table
        .write_record(["cell", "mask_variant", "ffn_variant", "seed", "status", "val_kendall_tau", "val_kendall_tau_ema", "train_mse", "error"])
        .map_err(anyhow::Error::from)?;
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    let mut group_order = Vec::new();
    let mut failed = 0;
    for (i, (cell, r)) in cells.iter().zip(&results).enumerate() {
        let key = (cell.mask_variant.to_string(), cell.ffn_variant.to_string());
        if !groups.contains_key(&key) {
            group_order.push(key.clone());
        }
        let g = groups.entry(key).or_default();
        g.2 += 1;
        let base = [i.to_string(), cell.mask_variant.to_string(), cell.ffn_variant.to_string(), cell.seed.to_string()];
        let row: Vec<String> = match r {
            Ok(o) => {
                g.0.extend(o.val_kt);
                g.1.extend(o.val_kt_ema);
                let mut h = csv::Writer::from_path(a.out.join("cells").join(format!("cell{i:03}_history.csv")))
                    .map_err(anyhow::Error::from)?;
                h.write_record(history_header()).map_err(anyhow::Error::from)?;
                for rec in &o.history {
                    h.write_record(rec).map_err(anyhow::Error::from)?;
                }
                h.flush().map_err(anyhow::Error::from)?;
                let rest = ["ok".into(), opt(o.val_kt), opt(o.val_kt_ema), o.train_mse.to_string(), String::new()];
                base.into_iter().chain(rest).collect()
            }
            Err(e) => {
                failed += 1;
                let rest = ["failed".into(), String::new(), String::new(), String::new(), format!("{e:#}")];
                base.into_iter().chain(rest).collect()
            }
        };
        table.write_record(&row).map_err(anyhow::Error::from)?;
    }
    table.flush().map_err(anyhow::Error::from)?;

    let mut summary = csv::Writer::from_path(a.out.join("summary.csv")).map_err(anyhow::Error::from)?;
    summary
        .write_record(["mask_variant", "ffn_variant", "cells", "ok", "mean_val_kendall_tau", "std_val_kendall_tau", "mean_val_kendall_tau_ema"])
        .map_err(anyhow::Error::from)?;
    for key in &group_order {
        let (kt, ema, n) = &groups[key];
        let (m, sd) = if kt.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(kt) };
        let me = if ema.is_empty() { f64::NAN } else { mean_std(ema).0 };
        summary
            .write_record([key.0.clone(), key.1.clone(), n.to_string(), kt.len().to_string(), m.to_string(), sd.to_string(), me.to_string()])
            .map_err(anyhow::Error::from)?;
        println!("{:<12} {:<16} mean val_kt {m:.4} ± {sd:.4} ({} of {n} cells)", key.0, key.1, kt.len());
    }
    summary.flush().map_err(anyhow::Error::from)?;
    eprintln!("{} cells on {jobs} workers in {:.1}s, {failed} failed", cells.len(), started.elapsed().as_secs_f64());
    Ok(())
}
