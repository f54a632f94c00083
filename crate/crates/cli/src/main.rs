mod ablate;
mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dagpredict::dag::{Dag, MaskVariant};
use dagpredict::datasets::{self, generate_synthetic, load_jsonl, save_jsonl, DagRecord, SynthConfig};
use dagpredict::metrics::EvalReport;
use dagpredict::model::{check_gradients, Checkpoint, FfnVariant, GraphInput, ModelConfig};
use dagpredict::seed::{substream, SPLIT};
use dagpredict::train::{fit, predict_targets, EpochRecord, Prepared, TrainError};
use serde_json::json;

use config::{Preset, RunConfig};

#[derive(Parser)]
#[command(name = "dagpredict", version, about = "Train and evaluate masked graph transformers on DAG datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic latency dataset as JSONL.
    GenData(GenDataArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Print evaluation metrics of a checkpoint on a dataset as JSON.
    Eval(EvalArgs),
    /// Write per-graph predictions of a checkpoint as CSV.
    Predict(PredictArgs),
    /// Train one model per grid cell and tabulate validation Kendall's tau.
    Ablate(ablate::AblateArgs),
    /// Finite-difference check of the full model's gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    depth_min: Option<usize>,
    #[arg(long)]
    depth_max: Option<usize>,
    #[arg(long)]
    width_min: Option<usize>,
    #[arg(long)]
    width_max: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    extra_edge_prob: Option<f64>,
}

/// Config sources shared by `train` and `ablate`.
#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// TOML file with [model], [train] and [data] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Dotted override, e.g. `--set model.channels=64`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), self.preset, &self.overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask_variant: Option<MaskVariant>,
    #[arg(long)]
    ffn_variant: Option<FfnVariant>,
    #[arg(long)]
    seed: Option<u64>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Restrict the report to one metric.
    #[arg(long, value_parser = ["kt", "mape", "acc"])]
    metric: Option<String>,
    /// Error bound for Acc(δ); repeatable.
    #[arg(long = "delta", default_value = "0.1")]
    deltas: Vec<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "accuracy")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    nodes: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long)]
    mask_variant: Option<MaskVariant>,
    #[arg(long)]
    ffn_variant: Option<FfnVariant>,
    /// Dropout probability; anything above zero makes the check fail.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Exit 2 for bad usage or configuration, 1 for failures while running.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub trait ResultExt<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate::run(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_graphs: a.n,
        seed: a.seed,
        depth_min: a.depth_min.unwrap_or(d.depth_min),
        depth_max: a.depth_max.unwrap_or(d.depth_max),
        width_min: a.width_min.unwrap_or(d.width_min),
        width_max: a.width_max.unwrap_or(d.width_max),
        beta: a.beta.unwrap_or(d.beta),
        extra_edge_prob: a.extra_edge_prob.unwrap_or(d.extra_edge_prob),
        ..d
    };
    cfg.validate().usage()?;
    let records = generate_synthetic(&cfg)?;
    save_jsonl(&records, &a.out)?;
    eprintln!("wrote {} graphs to {}", records.len(), a.out.display());
    Ok(())
}

/// Missing or malformed input data is a usage error.
pub fn load_data(path: &Path) -> Result<Vec<DagRecord>, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(anyhow!("data file {} does not exist", path.display())));
    }
    let records = load_jsonl(path).usage()?;
    if records.is_empty() {
        return Err(Failure::Usage(anyhow!("data file {} holds no graphs", path.display())));
    }
    Ok(records)
}

pub fn to_pairs(records: &[DagRecord]) -> Vec<(Dag, f64)> {
    records.iter().map(|r| (r.to_dag().expect("validated on load"), r.target)).collect()
}

pub fn split_records(records: &[DagRecord], cfg: &RunConfig) -> Result<datasets::Split<DagRecord>, Failure> {
    let s = datasets::split(records, cfg.data.split, substream(cfg.data.split_seed, SPLIT)).usage()?;
    if s.train.is_empty() {
        return Err(Failure::Usage(anyhow!("training split is empty")));
    }
    Ok(s)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn history_header() -> [&'static str; 5] {
    ["epoch", "lr", "train_mse", "val_metric", "val_metric_ema"]
}

pub fn history_row(r: &EpochRecord) -> [String; 5] {
    [r.epoch.to_string(), r.lr.to_string(), r.train_mse.to_string(), opt(r.val_metric), opt(r.val_metric_ema)]
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = a.config.load().usage()?;
    if let Some(m) = a.mask_variant {
        cfg.model.mask_variant = m;
    }
    if let Some(f) = a.ffn_variant {
        cfg.model.ffn_variant = f;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate().usage()?;
    let records = load_data(&a.data)?;
    let split = split_records(&records, &cfg)?;
    let train_set = Prepared::new(&to_pairs(&split.train), &cfg.model).usage()?;
    let val_set = Prepared::new(&to_pairs(&split.val), &cfg.model).usage()?;

    let out = &a.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), format!("# data = {}\n{}", a.data.display(), cfg.to_toml()?))?;
    save_jsonl(&split.val, &out.join("val.jsonl"))?;
    if !split.test.is_empty() {
        save_jsonl(&split.test, &out.join("test.jsonl"))?;
    }

    let mut history = csv::Writer::from_path(out.join("history.csv"))?;
    history.write_record(history_header()).map_err(anyhow::Error::from)?;
    let mut io_err = None;
    let started = Instant::now();
    let quiet = a.quiet;
    let result = fit(&cfg.model, &train_set, &val_set, &cfg.train, &mut |r| {
        if let Err(e) = history.write_record(history_row(r)).and_then(|_| Ok(history.flush()?)) {
            io_err.get_or_insert(e);
        }
        if !quiet {
            eprintln!(
                "epoch {:>5}  lr {:.3e}  train_mse {:.6}  val_kt {}",
                r.epoch,
                r.lr,
                r.train_mse,
                r.val_metric.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
    });
    drop(history);
    if let Some(e) = io_err {
        return Err(anyhow::Error::from(e).context("writing history.csv").into());
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e @ TrainError::DivergedLoss { .. }) => return Err(anyhow!(e).into()),
        Err(e @ (TrainError::InvalidConfig(_) | TrainError::EmptyDataset)) => return Err(Failure::Usage(e.into())),
        Err(e) => return Err(anyhow!(e).into()),
    };
    let norm = outcome.target_norm;
    for (name, params) in
        [("final", &outcome.final_params), ("best", &outcome.best_params), ("best_ema", &outcome.best_ema_params)]
    {
        Checkpoint::new(params.clone(), norm).save(&out.join(format!("{name}.ckpt.json")))?;
    }

    let report = if split.val.len() >= 2 {
        let pred = predict_targets(&outcome.final_params, norm.as_ref(), &val_set.graphs)?;
        Some(EvalReport::compute(&pred, &val_set.targets, &[0.1])?)
    } else {
        None
    };
    let summary = json!({
        "epochs": cfg.train.epochs,
        "train_size": split.train.len(),
        "val_size": split.val.len(),
        "best_epoch": outcome.best_epoch,
        "best_ema_epoch": outcome.best_ema_epoch,
        "seconds": started.elapsed().as_secs_f64(),
        "final_val": report.as_ref().map(|r| serde_json::to_value(r).expect("report serializes")),
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    match report.and_then(|r| r.kendall_tau) {
        Some(kt) => println!("final val kendall_tau: {kt}"),
        None => println!("final val kendall_tau: undefined"),
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(anyhow!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn graphs_for(records: &[DagRecord], cfg: &ModelConfig) -> Result<Vec<GraphInput>, Failure> {
    to_pairs(records).iter().map(|(d, _)| GraphInput::new(d, cfg)).collect::<Result<_, _>>().usage()
}

fn eval(a: EvalArgs) -> CmdResult {
    if let Some(d) = a.deltas.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(Failure::Usage(anyhow!("delta {d} must be positive")));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let records = load_data(&a.data)?;
    let graphs = graphs_for(&records, ckpt.params.config())?;
    let pred = predict_targets(&ckpt.params, ckpt.target_norm.as_ref(), &graphs)?;
    let gt: Vec<f64> = records.iter().map(|r| r.target).collect();
    let report = EvalReport::compute(&pred, &gt, &a.deltas)?;
    let mut value = serde_json::to_value(&report)?;
    if let (Some(metric), Some(obj)) = (a.metric.as_deref(), value.as_object_mut()) {
        obj.retain(|k, _| {
            k == "n"
                || match metric {
                    "kt" => k == "kendall_tau",
                    "mape" => k == "mape",
                    _ => k.starts_with("acc@"),
                }
        });
    }
    println!("{value}");
    Ok(())
}

fn predict(a: PredictArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let records = load_data(&a.data)?;
    let graphs = graphs_for(&records, ckpt.params.config())?;
    let pred = predict_targets(&ckpt.params, ckpt.target_norm.as_ref(), &graphs)?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["index", "prediction", "target"]).map_err(anyhow::Error::from)?;
    for (i, (p, r)) in pred.iter().zip(&records).enumerate() {
        w.write_record([i.to_string(), p.to_string(), r.target.to_string()]).map_err(anyhow::Error::from)?;
    }
    w.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CmdResult {
    let base = RunConfig::preset(a.preset).model;
    let cfg = ModelConfig {
        channels: a.channels,
        blocks: a.blocks,
        dropout: a.dropout,
        mask_variant: a.mask_variant.unwrap_or(base.mask_variant),
        ffn_variant: a.ffn_variant.unwrap_or(base.ffn_variant),
        ..base
    };
    cfg.validate().usage()?;
    if a.nodes == 0 {
        return Err(Failure::Usage(anyhow!("--nodes must be positive")));
    }
    let r = check_gradients(&cfg, a.nodes, a.seed, a.h, a.tol)?;
    println!(
        "max relative error {:e} at {}[{}] (analytic {:e}, numeric {:e}) over {} parameters",
        r.report.max_rel_err, r.param, r.offset, r.report.analytic, r.report.numeric, r.report.checked
    );
    if r.report.passed {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(anyhow!("gradient check failed at parameter {} (relative error {:e} > {:e})", r.param, r.report.max_rel_err, a.tol)
            .into())
    }
}
