//! Optimizer and the three training regimes: pretraining on prior episodes,
//! fine-tuning with per-step randomized support/query resplits, and training
//! from scratch.
//!
//! Fine-tune and scratch share one episodic loop. Preprocessing is fitted
//! once on the training split; every step then draws a fresh support/query
//! partition of the processed rows. Validation is evaluated on a fixed
//! episode (full training split as support) and the best-metric parameters
//! are returned, never the last ones.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{
    params_from_tensors, params_to_tensors, read_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError, NamedTensor,
};
use crate::dataio::{DataError, Dataset};
use crate::model::{argmax_row, backward, forward, Episode, ModelConfig, ModelError, ModelParams, Output};
use crate::preprocess::{PreprocessError, PreprocessOptions, PreprocessState, ProcessedMatrix, Targets};
use crate::prior::{sample_prior_episode, PriorConfig, PriorError};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::scalar::Scalar;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EMA_ALPHA: f64 = 0.05;
const RESPLIT_RETRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pretrain,
    Finetune,
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub support_fraction: f64,
    pub validation_fraction: f64,
    pub schedule: Schedule,
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Regime defaults. Fine-tuning uses lr 1e-5 with no weight decay;
    /// scratch uses lr 1e-4 with weight decay 1e-5.
    pub fn new(regime: Regime) -> Self {
        let (learning_rate, weight_decay) = match regime {
            Regime::Pretrain => (3e-4, 0.0),
            Regime::Finetune => (1e-5, 0.0),
            Regime::Scratch => (1e-4, 1e-5),
        };
        Self {
            regime,
            learning_rate,
            weight_decay,
            max_steps: 2000,
            eval_every: 50,
            patience: 16,
            seed: 0,
            support_fraction: 0.8,
            validation_fraction: 0.1,
            schedule: Schedule::Constant,
            clip_norm: Some(1.0),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(TrainError::InvalidConfig("support_fraction must lie in (0,1)".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidConfig("patience must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let horizon = self.max_steps.max(1) as f64;
                let t = (step as f64).min(horizon);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t / horizon).cos())
            }
        }
    }
}

/// Partial overrides applied on top of regime defaults (benchmark variants,
/// config files).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_steps: Option<usize>,
    pub eval_every: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub support_fraction: Option<f64>,
    pub validation_fraction: Option<f64>,
    pub schedule: Option<Schedule>,
    pub clip_norm: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.max_steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.support_fraction {
            cfg.support_fraction = v;
        }
        if let Some(v) = self.validation_fraction {
            cfg.validation_fraction = v;
        }
        if let Some(v) = self.schedule {
            cfg.schedule = v;
        }
        if let Some(v) = self.clip_norm {
            cfg.clip_norm = Some(v);
        }
        cfg
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training failed at step {step}: {source}")]
    AtStep { step: u64, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("irreducible degeneracy: {0}")]
    IrreducibleDegeneracy(String),
    #[error("non-finite parameter update at step {0}")]
    NonFiniteUpdate(u64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimizer state plus everything needed to resume a run bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState<F: Scalar> {
    pub params: ModelParams<F>,
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    pub step: u64,
    pub best_metric: Option<f64>,
    pub evals_since_best: usize,
    pub rng: Rng,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(params: ModelParams<F>, seed: u64) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        Self { params, m, v, step: 0, best_metric: None, evals_since_best: 0, rng: rng_from_seed(seed) }
    }
}

/// Scale gradients down to the given global L2 norm when they exceed it.
pub fn clip_global_norm<F: Scalar>(grads: &mut ModelParams<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().into_f64();
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(F::cast(max_norm / norm));
    }
    norm
}

/// One decoupled-weight-decay adaptive-moment update (beta1 0.9, beta2 0.999,
/// eps 1e-8). Weight decay multiplies parameters before the adaptive step;
/// the step counter advances by one.
pub fn optimizer_step<F: Scalar>(
    state: &mut TrainState<F>,
    grads: &ModelParams<F>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let lr = cfg.lr_at(state.step);
    let t = state.step + 1;
    let b1 = F::cast(BETA1);
    let b2 = F::cast(BETA2);
    let one_minus_b1 = F::cast(1.0 - BETA1);
    let one_minus_b2 = F::cast(1.0 - BETA2);
    let bias1 = F::cast(1.0 - BETA1.powi(t as i32));
    let bias2 = F::cast(1.0 - BETA2.powi(t as i32));
    let eps = F::cast(ADAM_EPS);
    let lr_f = F::cast(lr);
    let decay = F::cast(1.0 - lr * cfg.weight_decay);

    let g_tensors = grads.tensors();
    let mut p_tensors = state.params.tensors_mut();
    let mut m_tensors = state.m.tensors_mut();
    let mut v_tensors = state.v.tensors_mut();
    for i in 0..g_tensors.len() {
        let g = g_tensors[i].1.as_slice();
        let p = p_tensors[i].as_slice_mut();
        let m = m_tensors[i].as_slice_mut();
        let v = v_tensors[i].as_slice_mut();
        for j in 0..g.len() {
            p[j] *= decay;
            m[j] = b1 * m[j] + one_minus_b1 * g[j];
            v[j] = b2 * v[j] + one_minus_b2 * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] -= lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    drop(p_tensors);
    state.step = t;
    if state.params.first_non_finite().is_some() {
        return Err(TrainError::NonFiniteUpdate(t));
    }
    Ok(())
}

/// A preprocessed training split ready for episodic resplitting.
#[derive(Debug, Clone)]
pub struct ProcessedDataset<F: Scalar> {
    pub x: ProcessedMatrix<F>,
    pub y: Targets<F>,
    pub n_classes: Option<usize>,
}

impl<F: Scalar> ProcessedDataset<F> {
    pub fn from_dataset(state: &PreprocessState<F>, ds: &Dataset) -> Result<Self, PreprocessError> {
        Ok(Self {
            x: state.transform_features(ds)?,
            y: state.transform_targets(ds)?,
            n_classes: state.n_classes(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.x.n_rows()
    }
}

/// Fresh uniformly random support/query resplit of a processed training set.
/// Classes with a single instance are forced into support; random draws are
/// retried until every class is represented on the support side.
pub fn make_finetune_episode<F: Scalar>(
    data: &ProcessedDataset<F>,
    fraction: f64,
    rng: &mut Rng,
) -> Result<Episode<F>, TrainError> {
    use rand::seq::SliceRandom;
    let n = data.n_rows();
    if n < 2 {
        return Err(TrainError::IrreducibleDegeneracy(format!("{n} rows cannot be resplit")));
    }
    let mut n_s = ((fraction * n as f64).round() as usize).clamp(1, n - 1);

    // Classes present, and the ones with exactly one instance.
    let (class_counts, forced): (Vec<usize>, Vec<usize>) = match &data.y {
        Targets::Classes(ys) => {
            let k = data.n_classes.unwrap_or_else(|| ys.iter().max().map_or(0, |m| m + 1));
            let mut counts = vec![0usize; k];
            for &y in ys {
                counts[y] += 1;
            }
            let forced = (0..n).filter(|&i| counts[ys[i]] == 1).collect();
            (counts, forced)
        }
        Targets::Reals(_) => (Vec::new(), Vec::new()),
    };
    if forced.len() >= n {
        return Err(TrainError::IrreducibleDegeneracy("every row is a singleton class".into()));
    }
    n_s = n_s.max(forced.len()).min(n - 1);

    let free: Vec<usize> = (0..n).filter(|i| !forced.contains(i)).collect();
    let needed_free = n_s - forced.len();

    let build = |sup: &mut Vec<usize>, qry: &mut Vec<usize>| -> Episode<F> {
        sup.sort_unstable();
        qry.sort_unstable();
        Episode::new(
            data.x.select(sup),
            data.y.select(sup),
            data.x.select(qry),
            Some(data.y.select(qry)),
            data.n_classes,
        )
        .expect("resplit of a consistent dataset")
    };

    let covers = |sup: &[usize]| -> bool {
        match &data.y {
            Targets::Classes(ys) => {
                let mut seen = vec![false; class_counts.len()];
                for &i in sup {
                    seen[ys[i]] = true;
                }
                seen.iter()
                    .enumerate()
                    .all(|(c, &s)| s || class_counts.get(c).copied().unwrap_or(0) == 0)
            }
            Targets::Reals(_) => true,
        }
    };

    let mut shuffled = free.clone();
    for _ in 0..RESPLIT_RETRIES {
        shuffled.shuffle(rng);
        let mut sup: Vec<usize> = forced.iter().copied().chain(shuffled[..needed_free].iter().copied()).collect();
        let mut qry: Vec<usize> = shuffled[needed_free..].to_vec();
        if covers(&sup) {
            return Ok(build(&mut sup, &mut qry));
        }
    }

    // Deterministic repair: swap one instance of each missing class into
    // support for a member of an over-represented class.
    if let Targets::Classes(ys) = &data.y {
        let mut sup: Vec<usize> =
            forced.iter().copied().chain(shuffled[..needed_free].iter().copied()).collect();
        let mut qry: Vec<usize> = shuffled[needed_free..].to_vec();
        let k = class_counts.len();
        for c in 0..k {
            if class_counts[c] == 0 || sup.iter().any(|&i| ys[i] == c) {
                continue;
            }
            let take = qry.iter().position(|&i| ys[i] == c).ok_or_else(|| {
                TrainError::IrreducibleDegeneracy(format!("class {c} vanished from the split"))
            })?;
            let mut sup_counts = vec![0usize; k];
            for &i in &sup {
                sup_counts[ys[i]] += 1;
            }
            let give = sup
                .iter()
                .position(|&i| sup_counts[ys[i]] > 1)
                .ok_or_else(|| TrainError::IrreducibleDegeneracy("support cannot spare a row".into()))?;
            let incoming = qry.swap_remove(take);
            let outgoing = std::mem::replace(&mut sup[give], incoming);
            qry.push(outgoing);
        }
        if covers(&sup) && !qry.is_empty() {
            return Ok(build(&mut sup, &mut qry));
        }
    }
    Err(TrainError::IrreducibleDegeneracy(format!(
        "no support covering every class after {RESPLIT_RETRIES} retries"
    )))
}

/// Per-step training record. `val_metric` is present on evaluation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub ema_loss: f64,
    pub val_metric: Option<f64>,
}

pub type History = Vec<StepRecord>;

struct MetricsLog {
    writer: Option<BufWriter<File>>,
}

impl MetricsLog {
    fn create(run_dir: Option<&Path>) -> Result<Self, TrainError> {
        let writer = match run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(BufWriter::new(File::create(dir.join("metrics.log"))?))
            }
            None => None,
        };
        Ok(Self { writer })
    }

    fn record(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        if let Some(w) = &mut self.writer {
            let val = rec.val_metric.map_or("-".to_string(), |v| format!("{v}"));
            writeln!(w, "{}\t{}\t{}\t{}", rec.step, rec.loss, rec.ema_loss, val)?;
        }
        Ok(())
    }

    /// Evaluation-only line (the step-0 validation pass has no train loss).
    fn record_eval_only(&mut self, step: u64, metric: f64) -> Result<(), TrainError> {
        if let Some(w) = &mut self.writer {
            writeln!(w, "{step}\t-\t-\t{metric}")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    best_metric: Option<f64>,
    evals_since_best: usize,
    rng: Rng,
}

/// Write a resumable training-state checkpoint (parameters, both moment
/// buffers, counters and the RNG stream).
pub fn save_train_state<F: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    state: &TrainState<F>,
) -> Result<(), CheckpointError> {
    let mut tensors = params_to_tensors(&state.params);
    for t in params_to_tensors(&state.m) {
        tensors.push(NamedTensor { name: format!("opt.m.{}", t.name), ..t });
    }
    for t in params_to_tensors(&state.v) {
        tensors.push(NamedTensor { name: format!("opt.v.{}", t.name), ..t });
    }
    let meta = StateMeta {
        step: state.step,
        best_metric: state.best_metric,
        evals_since_best: state.evals_since_best,
        rng: state.rng.clone(),
    };
    write_checkpoint(
        path,
        &Checkpoint { config: cfg.clone(), meta: Some(serde_json::to_value(&meta)?), tensors },
    )
}

/// Restore a training-state checkpoint saved by [`save_train_state`].
pub fn load_train_state<F: Scalar>(path: &Path) -> Result<(ModelConfig, TrainState<F>), TrainError> {
    let ckpt = read_checkpoint(path)?;
    let meta: StateMeta = serde_json::from_value(
        ckpt.meta
            .clone()
            .ok_or_else(|| CheckpointError::Corrupt("checkpoint has no training metadata".into()))?,
    )
    .map_err(CheckpointError::Header)?;
    let strip = |prefix: &str| -> Vec<NamedTensor> {
        ckpt.tensors
            .iter()
            .filter_map(|t| {
                t.name.strip_prefix(prefix).map(|n| NamedTensor {
                    name: n.to_string(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
            })
            .collect()
    };
    let plain: Vec<NamedTensor> =
        ckpt.tensors.iter().filter(|t| !t.name.starts_with("opt.")).cloned().collect();
    let params = params_from_tensors::<F>(&ckpt.config, &plain)?;
    let m = params_from_tensors::<F>(&ckpt.config, &strip("opt.m."))?;
    let v = params_from_tensors::<F>(&ckpt.config, &strip("opt.v."))?;
    Ok((
        ckpt.config,
        TrainState {
            params,
            m,
            v,
            step: meta.step,
            best_metric: meta.best_metric,
            evals_since_best: meta.evals_since_best,
            rng: meta.rng,
        },
    ))
}

/// One gradient step on an episode: backward, clip, optimizer update.
pub fn train_step<F: Scalar>(
    state: &mut TrainState<F>,
    episode: &Episode<F>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let step_index = state.step;
    let (loss_value, mut grads) =
        backward(episode, &state.params, model_cfg).map_err(|source| TrainError::AtStep { step: step_index, source })?;
    if let Some(max_norm) = cfg.clip_norm {
        clip_global_norm(&mut grads, max_norm);
    }
    optimizer_step(state, &grads, cfg)?;
    Ok(loss_value.into_f64())
}

fn write_step_checkpoints<F: Scalar>(
    run_dir: Option<&Path>,
    model_cfg: &ModelConfig,
    state: &TrainState<F>,
) -> Result<(), TrainError> {
    if let Some(dir) = run_dir {
        save_train_state(&dir.join(format!("step-{}.ckpt", state.step)), model_cfg, state)?;
    }
    Ok(())
}

/// Pretrain on freshly sampled prior episodes. Returns the final parameters
/// and the per-step loss history.
pub fn pretrain<F: Scalar>(
    model_cfg: &ModelConfig,
    prior_cfg: &PriorConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(ModelParams<F>, History), TrainError> {
    if cfg.regime != Regime::Pretrain {
        return Err(TrainError::InvalidConfig(format!("pretrain called with {:?} regime", cfg.regime)));
    }
    cfg.validate()?;
    model_cfg.validate()?;
    prior_cfg.validate(model_cfg.max_features)?;

    let params = ModelParams::<F>::init(model_cfg, derive_seed(cfg.seed, &[0]))?;
    let mut state = TrainState::new(params, derive_seed(cfg.seed, &[1]));
    let mut log = MetricsLog::create(run_dir)?;
    let mut history = History::with_capacity(cfg.max_steps);
    let mut ema = None;

    for _ in 0..cfg.max_steps {
        let episode: Episode<F> = sample_prior_episode(prior_cfg, model_cfg.max_features, &mut state.rng)?;
        let loss_value = train_step(&mut state, &episode, model_cfg, cfg)?;
        let ema_value = match ema {
            None => loss_value,
            Some(prev) => EMA_ALPHA * loss_value + (1.0 - EMA_ALPHA) * prev,
        };
        ema = Some(ema_value);
        let rec = StepRecord { step: state.step, loss: loss_value, ema_loss: ema_value, val_metric: None };
        log.record(&rec)?;
        history.push(rec);
        if state.step % cfg.eval_every as u64 == 0 {
            write_step_checkpoints(run_dir, model_cfg, &state)?;
        }
    }
    log.flush()?;
    if let Some(dir) = run_dir {
        crate::checkpoint::save_params(&dir.join("best.ckpt"), model_cfg, &state.params)?;
    }
    Ok((state.params, history))
}

/// Validation metric, higher is better: accuracy for classification,
/// negative transformed-space mean squared error for regression.
pub fn validation_metric<F: Scalar>(
    params: &ModelParams<F>,
    model_cfg: &ModelConfig,
    episode: &Episode<F>,
    truth: &Targets<F>,
) -> Result<f64, ModelError> {
    let out = forward(episode, params, model_cfg)?;
    match (&out, truth) {
        (Output::Logits(logits), Targets::Classes(ys)) => {
            let k = episode.n_classes.unwrap_or(logits.ncols());
            let mut correct = 0usize;
            for (i, &y) in ys.iter().enumerate() {
                let row = logits.row(i);
                let pred = argmax_row(&row.as_slice().expect("contiguous")[..k]);
                if pred == y {
                    correct += 1;
                }
            }
            Ok(correct as f64 / ys.len() as f64)
        }
        (Output::Reals(preds), Targets::Reals(ys)) => {
            let mut mse = 0.0;
            for (p, y) in preds.iter().zip(ys.iter()) {
                let d = p.into_f64() - y.into_f64();
                mse += d * d;
            }
            Ok(-(mse / ys.len() as f64))
        }
        _ => Err(ModelError::InvalidEpisode("output kind does not match validation targets".into())),
    }
}

/// Shared fine-tune / scratch loop over one real dataset.
fn episodic_loop<F: Scalar>(
    init: ModelParams<F>,
    model_cfg: &ModelConfig,
    train_split: &Dataset,
    validation_split: &Dataset,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(ModelParams<F>, History), TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    train_split.check_feature_budget(model_cfg.max_features)?;
    init.validate_shapes(model_cfg)?;

    let prep = PreprocessState::<F>::fit(train_split, &PreprocessOptions::with_max_features(model_cfg.max_features))?;
    if let Some(k) = prep.n_classes() {
        if k > model_cfg.max_classes {
            return Err(TrainError::InvalidConfig(format!(
                "dataset has {k} classes, model supports {}",
                model_cfg.max_classes
            )));
        }
    }
    let data = ProcessedDataset::from_dataset(&prep, train_split)?;
    let val_x = prep.transform_features(validation_split)?;
    let val_y = prep.transform_targets(validation_split)?;
    let val_episode = Episode::new(data.x.clone(), data.y.clone(), val_x, None, data.n_classes)?;

    let mut state = TrainState::new(init, derive_seed(cfg.seed, &[2]));
    let mut log = MetricsLog::create(run_dir)?;
    let mut history = History::new();
    let mut ema = None;

    // Evaluation 0: the starting parameters are the first "best" candidate,
    // so early stopping can never return something worse than the init.
    let mut best_metric = validation_metric(&state.params, model_cfg, &val_episode, &val_y)
        .map_err(|source| TrainError::AtStep { step: 0, source })?;
    let mut best_params = state.params.clone();
    state.best_metric = Some(best_metric);
    log.record_eval_only(0, best_metric)?;

    while state.step < cfg.max_steps as u64 {
        let episode = make_finetune_episode(&data, cfg.support_fraction, &mut state.rng)?;
        let loss_value = train_step(&mut state, &episode, model_cfg, cfg)?;
        let ema_value = match ema {
            None => loss_value,
            Some(prev) => EMA_ALPHA * loss_value + (1.0 - EMA_ALPHA) * prev,
        };
        ema = Some(ema_value);

        let mut val_metric = None;
        if state.step % cfg.eval_every as u64 == 0 || state.step == cfg.max_steps as u64 {
            let metric = validation_metric(&state.params, model_cfg, &val_episode, &val_y)
                .map_err(|source| TrainError::AtStep { step: state.step, source })?;
            val_metric = Some(metric);
            if metric > best_metric {
                best_metric = metric;
                best_params = state.params.clone();
                state.best_metric = Some(metric);
                state.evals_since_best = 0;
            } else {
                state.evals_since_best += 1;
            }
            write_step_checkpoints(run_dir, model_cfg, &state)?;
        }

        let rec = StepRecord { step: state.step, loss: loss_value, ema_loss: ema_value, val_metric };
        log.record(&rec)?;
        history.push(rec);

        if state.evals_since_best >= cfg.patience {
            break;
        }
    }
    log.flush()?;
    if let Some(dir) = run_dir {
        crate::checkpoint::save_params(&dir.join("best.ckpt"), model_cfg, &best_params)?;
    }
    Ok((best_params, history))
}

/// Fine-tune pretrained parameters with per-step randomized resplits of the
/// training split, early-stopped on the validation split.
pub fn finetune<F: Scalar>(
    init: ModelParams<F>,
    model_cfg: &ModelConfig,
    train_split: &Dataset,
    validation_split: &Dataset,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(ModelParams<F>, History), TrainError> {
    if cfg.regime != Regime::Finetune {
        return Err(TrainError::InvalidConfig(format!("finetune called with {:?} regime", cfg.regime)));
    }
    episodic_loop(init, model_cfg, train_split, validation_split, cfg, run_dir)
}

/// Same loop as fine-tuning but starting from fresh initialization.
pub fn train_scratch<F: Scalar>(
    model_cfg: &ModelConfig,
    train_split: &Dataset,
    validation_split: &Dataset,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(ModelParams<F>, History), TrainError> {
    if cfg.regime != Regime::Scratch {
        return Err(TrainError::InvalidConfig(format!("train_scratch called with {:?} regime", cfg.regime)));
    }
    let init = ModelParams::<F>::init(model_cfg, derive_seed(cfg.seed, &[0]))?;
    episodic_loop(init, model_cfg, train_split, validation_split, cfg, run_dir)
}

/// Carve a fixed validation subset out of a training split (last-stage
/// convenience shared by the CLI and the benchmark harness).
pub fn carve_validation(train: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let spec = crate::dataio::SplitSpec::new(1.0 - fraction, seed);
    crate::dataio::train_test_split(train, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::train_test_split;
    use crate::dataio::{SplitSpec, TaskKind};
    use crate::prior::sample_prior_dataset;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            feedforward_dim: 32,
            max_features: 16,
            max_classes: 5,
            task: TaskKind::Classification,
            query_self_attend: true,
        }
    }

    fn tiny_prior() -> PriorConfig {
        PriorConfig {
            min_rows: 48,
            max_rows: 96,
            feature_count_range: (2, 6),
            class_count_range: (2, 3),
            latent_width_range: (4, 8),
            n_components_range: (1, 3),
            noise_scale: 0.05,
            seed: 0,
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        sample_prior_dataset(&tiny_prior(), &mut rng)
    }

    #[test]
    fn regime_defaults_match_stated_hyperparameters() {
        let ft = TrainConfig::new(Regime::Finetune);
        assert_eq!(ft.learning_rate, 1.0e-5);
        assert_eq!(ft.weight_decay, 0.0);
        let sc = TrainConfig::new(Regime::Scratch);
        assert_eq!(sc.learning_rate, 1.0e-4);
        assert_eq!(sc.weight_decay, 1.0e-5);
    }

    #[test]
    fn zero_gradients_without_decay_are_a_fixed_point() {
        let cfg = tiny_model();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let snapshot = params.clone();
        let mut state = TrainState::new(params, 0);
        let grads = state.params.zeros_like();
        let mut tc = TrainConfig::new(Regime::Finetune);
        tc.weight_decay = 0.0;
        optimizer_step(&mut state, &grads, &tc).unwrap();
        assert_eq!(state.params, snapshot);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        let cfg = tiny_model();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let before = params.w_x[(0, 0)];
        let mut state = TrainState::new(params, 0);
        let mut grads = state.params.zeros_like();
        grads.w_x[(0, 0)] = 1.0;
        let mut tc = TrainConfig::new(Regime::Finetune);
        tc.learning_rate = 0.1;
        tc.weight_decay = 0.0;
        optimizer_step(&mut state, &grads, &tc).unwrap();
        let update = state.params.w_x[(0, 0)] - before;
        // Bias-corrected first step is -lr / (1 + eps-ish).
        assert!((update + 0.1).abs() < 1e-6, "update {update}");
        // Untouched parameters stay put (no weight decay).
        assert_eq!(state.params.w_y, state.m.w_y.mapv(|_| 0.0) + &ModelParams::<f64>::init(&cfg, 3).unwrap().w_y);
    }

    #[test]
    fn decoupled_decay_shrinks_parameters_multiplicatively() {
        let cfg = tiny_model();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let snapshot = params.clone();
        let mut state = TrainState::new(params, 0);
        let grads = state.params.zeros_like();
        let mut tc = TrainConfig::new(Regime::Scratch);
        tc.learning_rate = 0.5;
        tc.weight_decay = 1e-5;
        optimizer_step(&mut state, &grads, &tc).unwrap();
        let factor = 1.0 - 0.5 * 1e-5;
        for ((_, a), (_, b)) in state.params.tensors().iter().zip(snapshot.tensors().iter()) {
            for (&x, &y) in a.as_slice().iter().zip(b.as_slice().iter()) {
                assert_eq!(x, y * factor);
            }
        }
    }

    #[test]
    fn gradient_clipping_rescales_to_the_max_norm() {
        let cfg = tiny_model();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let mut grads = params.zeros_like();
        grads.w_x[(0, 0)] = 3.0;
        grads.w_x[(0, 1)] = 4.0;
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }

    fn processed(ds: &Dataset, cfg: &ModelConfig) -> ProcessedDataset<f64> {
        let prep =
            PreprocessState::<f64>::fit(ds, &PreprocessOptions::with_max_features(cfg.max_features)).unwrap();
        ProcessedDataset::from_dataset(&prep, ds).unwrap()
    }

    #[test]
    fn finetune_episode_counts_and_disjointness() {
        let cfg = tiny_model();
        let ds = tiny_dataset(11);
        let data = processed(&ds, &cfg);
        let n = data.n_rows();
        let mut rng = rng_from_seed(1);
        let e = make_finetune_episode(&data, 0.8, &mut rng).unwrap();
        assert_eq!(e.n_support(), ((0.8 * n as f64).round() as usize).max(1));
        assert_eq!(e.n_support() + e.n_query(), n);
    }

    #[test]
    fn consecutive_resplits_differ() {
        let cfg = tiny_model();
        let ds = tiny_dataset(12);
        let data = processed(&ds, &cfg);
        let mut rng = rng_from_seed(2);
        let mut seen = std::collections::HashSet::new();
        let calls = 100;
        for _ in 0..calls {
            let e = make_finetune_episode(&data, 0.8, &mut rng).unwrap();
            // Membership vector keyed by the support rows' feature bits.
            let key: Vec<u64> = e
                .x_support
                .values
                .column(0)
                .iter()
                .map(|v| v.to_bits())
                .collect();
            seen.insert(key);
        }
        assert!(seen.len() >= 99, "only {} distinct partitions in {calls} calls", seen.len());
    }

    #[test]
    fn singleton_class_always_lands_in_support() {
        use crate::dataio::{Cell, ColumnSchema};
        let schema = vec![ColumnSchema::numeric("x"), ColumnSchema::categorical("y").target()];
        let mut rows = Vec::new();
        for i in 0..9 {
            rows.push(vec![Cell::Num(i as f64), Cell::Text((i % 2).to_string())]);
        }
        rows.push(vec![Cell::Num(99.0), Cell::Text("rare".into())]);
        let ds = Dataset::new(schema, rows, TaskKind::Classification).unwrap();
        let cfg = tiny_model();
        let data = processed(&ds, &cfg);
        let rare_class = 2usize; // first-appearance order: "0", "1", "rare"
        let mut rng = rng_from_seed(3);
        for _ in 0..50 {
            let e = make_finetune_episode(&data, 0.8, &mut rng).unwrap();
            match (&e.y_support, e.y_query.as_ref().unwrap()) {
                (Targets::Classes(ys), Targets::Classes(yq)) => {
                    assert!(ys.contains(&rare_class));
                    assert!(!yq.contains(&rare_class));
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn pretrain_zero_steps_returns_initialization() {
        let cfg = tiny_model();
        let mut tc = TrainConfig::new(Regime::Pretrain);
        tc.max_steps = 0;
        tc.seed = 5;
        let (params, history) = pretrain::<f64>(&cfg, &tiny_prior(), &tc, None).unwrap();
        assert!(history.is_empty());
        let expected = ModelParams::<f64>::init(&cfg, derive_seed(5, &[0])).unwrap();
        assert_eq!(params, expected);
    }

    #[test]
    fn pretrain_history_is_bit_identical_across_runs() {
        let cfg = tiny_model();
        let mut tc = TrainConfig::new(Regime::Pretrain);
        tc.max_steps = 8;
        tc.seed = 6;
        let (p1, h1) = pretrain::<f64>(&cfg, &tiny_prior(), &tc, None).unwrap();
        let (p2, h2) = pretrain::<f64>(&cfg, &tiny_prior(), &tc, None).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    fn split_for_tuning(seed: u64) -> (Dataset, Dataset) {
        let ds = tiny_dataset(seed);
        let (train, val) = train_test_split(&ds, &SplitSpec::new(0.9, seed)).unwrap();
        (train, val)
    }

    #[test]
    fn finetune_zero_steps_returns_the_checkpoint() {
        let cfg = tiny_model();
        let init = ModelParams::<f64>::init(&cfg, 9).unwrap();
        let (train, val) = split_for_tuning(21);
        let mut tc = TrainConfig::new(Regime::Finetune);
        tc.max_steps = 0;
        let (params, _) = finetune(init.clone(), &cfg, &train, &val, &tc, None).unwrap();
        assert_eq!(params, init);
    }

    #[test]
    fn stalled_metric_with_patience_one_returns_first_evaluation() {
        let cfg = tiny_model();
        let init = ModelParams::<f64>::init(&cfg, 10).unwrap();
        let (train, val) = split_for_tuning(22);
        let mut tc = TrainConfig::new(Regime::Finetune);
        // Learning rate so small the metric can never strictly improve.
        tc.learning_rate = 1e-30;
        tc.max_steps = 20;
        tc.eval_every = 1;
        tc.patience = 1;
        let (params, history) = finetune(init.clone(), &cfg, &train, &val, &tc, None).unwrap();
        assert_eq!(params, init);
        assert!(history.len() < 20, "early stop should cut the run short");
    }

    #[test]
    fn returned_params_match_best_validation_metric() {
        let cfg = tiny_model();
        let (train, val) = split_for_tuning(23);
        let mut tc = TrainConfig::new(Regime::Scratch);
        tc.learning_rate = 3e-4;
        tc.max_steps = 12;
        tc.eval_every = 2;
        tc.patience = 50;
        tc.seed = 4;
        let (params, history) = train_scratch::<f64>(&cfg, &train, &val, &tc, None).unwrap();

        // Recompute the metric of the returned params on the same episode.
        let prep =
            PreprocessState::<f64>::fit(&train, &PreprocessOptions::with_max_features(cfg.max_features))
                .unwrap();
        let data = ProcessedDataset::from_dataset(&prep, &train).unwrap();
        let val_x = prep.transform_features(&val).unwrap();
        let val_y = prep.transform_targets(&val).unwrap();
        let episode = Episode::new(data.x, data.y, val_x, None, data.n_classes).unwrap();
        let returned = validation_metric(&params, &cfg, &episode, &val_y).unwrap();

        let best_seen = history
            .iter()
            .filter_map(|r| r.val_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        let init_metric = {
            let init = ModelParams::<f64>::init(&cfg, derive_seed(4, &[0])).unwrap();
            validation_metric(&init, &cfg, &episode, &val_y).unwrap()
        };
        assert_eq!(returned, best_seen.max(init_metric));
    }

    #[test]
    fn train_state_round_trip_resumes_bit_identically() {
        let cfg = tiny_model();
        let prior = tiny_prior();
        let mut tc = TrainConfig::new(Regime::Pretrain);
        tc.seed = 7;
        let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let mut state = TrainState::new(params, 77);

        // One warm-up step so moments are non-trivial.
        let e: Episode<f64> = sample_prior_episode(&prior, cfg.max_features, &mut state.rng).unwrap();
        train_step(&mut state, &e, &cfg, &tc).unwrap();

        let file = tempfile::NamedTempFile::new().unwrap();
        save_train_state(file.path(), &cfg, &state).unwrap();
        let (cfg2, mut restored) = load_train_state::<f64>(file.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(restored.params, state.params);
        assert_eq!(restored.step, state.step);

        // One more step on each; they must match bit for bit.
        let e1: Episode<f64> = sample_prior_episode(&prior, cfg.max_features, &mut state.rng).unwrap();
        train_step(&mut state, &e1, &cfg, &tc).unwrap();
        let e2: Episode<f64> = sample_prior_episode(&prior, cfg.max_features, &mut restored.rng).unwrap();
        train_step(&mut restored, &e2, &cfg, &tc).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(state.params, restored.params);
        assert_eq!(state.m, restored.m);
        assert_eq!(state.v, restored.v);
    }

    #[test]
    fn wrong_regime_is_rejected() {
        let cfg = tiny_model();
        let tc = TrainConfig::new(Regime::Finetune);
        assert!(matches!(
            pretrain::<f64>(&cfg, &tiny_prior(), &tc, None),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let mut tc = TrainConfig::new(Regime::Pretrain);
        tc.schedule = Schedule::Cosine;
        tc.max_steps = 100;
        assert_eq!(tc.lr_at(0), tc.learning_rate);
        assert!(tc.lr_at(50) < tc.learning_rate);
        assert!(tc.lr_at(100) < 1e-12);
    }
}
