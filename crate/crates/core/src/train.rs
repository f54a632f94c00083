//! Training loop: AdamW with decoupled weight decay, linear warmup into
//! cosine or linear decay, parameter EMA, and MSE on normalized targets.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::dag::Dag;
use crate::metrics::kendall_tau;
use crate::model::{
    init_params, loss_and_grad, predict_many, Batch, GraphInput, Mode, ModelConfig, ModelError, Params, TargetNorm,
};
use crate::seed::{splitmix64, substream, DROPOUT, INIT, SHUFFLE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("epoch {epoch} outside [0, {epochs}]")]
    OutOfRange { epoch: f64, epochs: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss diverged in epoch {epoch} (last finite epoch: {last_finite})")]
    DivergedLoss { epoch: usize, last_finite: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Schedule {
    #[default]
    Cosine,
    LinearDecay,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Cosine => "Cosine",
            Schedule::LinearDecay => "LinearDecay",
        })
    }
}

impl FromStr for Schedule {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Schedule::Cosine),
            "lineardecay" | "linear" => Ok(Schedule::LinearDecay),
            _ => Err(TrainError::InvalidConfig(format!("unknown schedule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub schedule: Schedule,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// `None` means `min(64, training set size)`.
    pub batch_size: Option<usize>,
    /// Map targets onto [0, 1] with the training split's range.
    pub normalize_targets: bool,
    /// Validate every this many epochs; the last epoch is always validated.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::accuracy()
    }
}

impl TrainConfig {
    pub fn accuracy() -> Self {
        Self {
            epochs: 3000,
            warmup_epochs: 300,
            lr_start: 1e-6,
            lr_peak: 1e-4,
            schedule: Schedule::Cosine,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            ema_decay: 0.99,
            batch_size: None,
            normalize_targets: true,
            eval_every: 1,
            seed: 0,
        }
    }

    pub fn latency() -> Self {
        Self { epochs: 50, warmup_epochs: 5, ..Self::accuracy() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be < epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.lr_start > 0.0 && self.lr_start < self.lr_peak && self.lr_peak.is_finite()) {
            return bad(format!("need 0 < lr_start {} < lr_peak {}", self.lr_start, self.lr_peak));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} must lie in [0, 1)", self.ema_decay));
        }
        if self.batch_size == Some(0) || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch: linear from `lr_start` to
/// `lr_peak` over the warmup, then cosine or linear decay to zero at
/// `epochs`.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if !(0.0..=cfg.epochs as f64).contains(&epoch) {
        return Err(TrainError::OutOfRange { epoch, epochs: cfg.epochs });
    }
    let warm = cfg.warmup_epochs as f64;
    if epoch < warm {
        return Ok(cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * epoch / warm);
    }
    let span = cfg.epochs as f64 - warm;
    let t = if span > 0.0 { (epoch - warm) / span } else { 0.0 };
    Ok(match cfg.schedule {
        Schedule::Cosine => cfg.lr_peak * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0,
        Schedule::LinearDecay => cfg.lr_peak * (1.0 - t),
    })
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update of a flat slice at (1-based) step `step`:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    weight_decay: f64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        theta[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + weight_decay * theta[i]);
    }
}

/// AdamW step over all parameters; layer-norm parameters and biases are
/// not decayed.
pub fn adamw_step(
    params: &mut Params,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!("{} grads for {} params", grads.len(), params.len())));
    }
    for (p, g) in params.entries().iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(TrainError::ShapeMismatch(format!("{}: {:?} vs {:?}", p.name, p.value.shape(), g.shape())));
        }
    }
    state.step += 1;
    for (i, p) in params.entries_mut().iter_mut().enumerate() {
        let wd = if p.kind.decays() { cfg.weight_decay } else { 0.0 };
        adamw_update(p.value.data_mut(), grads[i].data(), &mut state.m[i], &mut state.v[i], state.step, lr, wd, cfg);
    }
    Ok(())
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut Params, params: &Params, decay: f64) -> Result<(), TrainError> {
    if ema.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!("{} ema tensors for {} params", ema.len(), params.len())));
    }
    for (e, p) in ema.entries_mut().iter_mut().zip(params.entries()) {
        if e.value.shape() != p.value.shape() {
            return Err(TrainError::ShapeMismatch(format!("{}: {:?} vs {:?}", p.name, e.value.shape(), p.value.shape())));
        }
        for (a, b) in e.value.data_mut().iter_mut().zip(p.value.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    /// Mean over the epoch's batches of the batch MSE, in normalized units.
    pub train_mse: f64,
    /// Validation Kendall's tau of the current parameters.
    pub val_metric: Option<f64>,
    /// Validation Kendall's tau of the EMA parameters.
    pub val_metric_ema: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: Params,
    pub best_params: Params,
    pub best_ema_params: Params,
    /// 0 when no validation data picked a better epoch.
    pub best_epoch: usize,
    pub best_ema_epoch: usize,
    pub target_norm: Option<TargetNorm>,
    pub history: Vec<EpochRecord>,
}

/// Graphs with their targets, prepared once for the whole run.
pub struct Prepared {
    pub graphs: Vec<GraphInput>,
    pub targets: Vec<f64>,
}

impl Prepared {
    pub fn new(data: &[(Dag, f64)], cfg: &ModelConfig) -> Result<Self, ModelError> {
        let graphs = data.iter().map(|(d, _)| GraphInput::new(d, cfg)).collect::<Result<_, _>>()?;
        Ok(Self { graphs, targets: data.iter().map(|(_, t)| *t).collect() })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

const EVAL_CHUNK: usize = 64;

fn diverged(epoch: usize) -> TrainError {
    TrainError::DivergedLoss { epoch: epoch + 1, last_finite: epoch }
}

/// Non-finite intermediates during training mean the run diverged.
fn classify(e: ModelError, epoch: usize) -> TrainError {
    match e {
        ModelError::Tensor(TensorError::NonFinite(_)) => diverged(epoch),
        e => e.into(),
    }
}

/// Validation tau, `None` when undefined (e.g. all predictions tied).
fn val_tau(params: &Params, val: &Prepared) -> Result<Option<f64>, ModelError> {
    if val.len() < 2 {
        return Ok(None);
    }
    let pred = predict_many(&val.graphs, params, EVAL_CHUNK)?;
    Ok(kendall_tau(&pred, &val.targets).ok())
}

fn better(candidate: Option<f64>, best: Option<f64>) -> bool {
    match (candidate, best) {
        (Some(c), Some(b)) => c > b,
        (Some(_), None) => true,
        _ => false,
    }
}

/// Trains a freshly initialized model. `on_epoch` sees every history row as
/// it is produced.
pub fn fit(
    model_cfg: &ModelConfig,
    train: &Prepared,
    val: &Prepared,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let params = init_params(model_cfg, substream(cfg.seed, INIT))?;
    fit_from(params, train, val, cfg, on_epoch)
}

/// Trains starting from the given parameters.
pub fn fit_from(
    mut params: Params,
    train: &Prepared,
    val: &Prepared,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let norm = if cfg.normalize_targets { TargetNorm::fit(&train.targets) } else { None };
    let scale = |y: f64| norm.map_or(y, |n| n.normalize(y));
    let targets: Vec<f64> = train.targets.iter().map(|&y| scale(y)).collect();

    let batch_size = cfg.batch_size.unwrap_or(64).min(train.len());
    let steps_per_epoch = train.len().div_ceil(batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, SHUFFLE));
    let dropout_base = substream(cfg.seed, DROPOUT);

    let mut state = AdamState::new(&params);
    let mut ema = params.clone();
    let mut grads: Vec<Tensor> = params.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let (mut best, mut best_ema) = (params.clone(), ema.clone());
    let (mut best_tau, mut best_ema_tau) = (None, None);
    let (mut best_epoch, mut best_ema_epoch) = (0, 0);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (step, idx) in order.chunks(batch_size).enumerate() {
            let graphs = idx.iter().map(|&i| &train.graphs[i]).collect();
            let batch = Batch::new(graphs)?;
            let t: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            grads.iter_mut().for_each(|g| g.data_mut().fill(0.0));
            let global_step = (epoch * steps_per_epoch + step) as u64;
            let mode = Mode::train(splitmix64(dropout_base ^ global_step));
            let loss = match loss_and_grad(&batch, &t, &params, mode, &mut grads) {
                Ok(l) if l.is_finite() => l,
                Ok(_) => return Err(diverged(epoch)),
                Err(e) => return Err(classify(e, epoch)),
            };
            loss_sum += loss;
            lr = lr_at(epoch as f64 + step as f64 / steps_per_epoch as f64, cfg)?;
            adamw_step(&mut params, &grads, &mut state, lr, cfg)?;
            if params.entries().iter().any(|p| !p.value.is_finite()) {
                return Err(diverged(epoch));
            }
            ema_update(&mut ema, &params, cfg.ema_decay)?;
        }
        let (val_metric, val_metric_ema) = if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            (
                val_tau(&params, val).map_err(|e| classify(e, epoch))?,
                val_tau(&ema, val).map_err(|e| classify(e, epoch))?,
            )
        } else {
            (None, None)
        };
        if better(val_metric, best_tau) {
            best_tau = val_metric;
            best = params.clone();
            best_epoch = epoch + 1;
        }
        if better(val_metric_ema, best_ema_tau) {
            best_ema_tau = val_metric_ema;
            best_ema = ema.clone();
            best_ema_epoch = epoch + 1;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_mse: loss_sum / steps_per_epoch as f64,
            val_metric,
            val_metric_ema,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    if best_tau.is_none() {
        best = params.clone();
        best_epoch = cfg.epochs;
    }
    if best_ema_tau.is_none() {
        best_ema = ema;
        best_ema_epoch = cfg.epochs;
    }
    Ok(TrainOutcome {
        final_params: params,
        best_params: best,
        best_ema_params: best_ema,
        best_epoch,
        best_ema_epoch,
        target_norm: norm,
        history,
    })
}

/// Predictions in target units: model outputs mapped back through `norm`.
pub fn predict_targets(
    params: &Params,
    norm: Option<&TargetNorm>,
    graphs: &[GraphInput],
) -> Result<Vec<f64>, ModelError> {
    let raw = predict_many(graphs, params, EVAL_CHUNK)?;
    Ok(match norm {
        Some(n) => raw.into_iter().map(|y| n.denormalize(y)).collect(),
        None => raw,
    })
}
