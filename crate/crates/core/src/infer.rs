//! Zero-shot / fine-tuned prediction paths: full-context inference with the
//! entire training set as support, and subsampled-ensemble inference.

use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Dataset, TaskKind};
use crate::model::{argmax_row, forward, predict_proba, Episode, ModelConfig, ModelError, ModelParams, Output};
use crate::preprocess::{PreprocessError, PreprocessOptions, PreprocessState, Targets, Vocab};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    FullContext,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    #[serde(default = "default_support_budget")]
    pub support_budget: usize,
    #[serde(default = "default_subset_size")]
    pub subset_size: usize,
    #[serde(default = "default_n_ensembles")]
    pub n_ensembles: usize,
    #[serde(default)]
    pub seed: u64,
    /// Query rows per forward pass; outputs are chunking-invariant.
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    /// Draw a distinct subset per test observation instead of per ensemble
    /// member (much slower; off by default).
    #[serde(default)]
    pub per_observation_subsets: bool,
}

fn default_support_budget() -> usize {
    10_000
}
fn default_subset_size() -> usize {
    1000
}
fn default_n_ensembles() -> usize {
    10
}
fn default_chunk_size() -> usize {
    1024
}

impl InferenceConfig {
    pub fn full_context() -> Self {
        Self {
            mode: InferenceMode::FullContext,
            support_budget: default_support_budget(),
            subset_size: default_subset_size(),
            n_ensembles: default_n_ensembles(),
            seed: 0,
            chunk_size: default_chunk_size(),
            per_observation_subsets: false,
        }
    }

    pub fn ensemble(subset_size: usize, n_ensembles: usize) -> Self {
        Self { mode: InferenceMode::Ensemble, subset_size, n_ensembles, ..Self::full_context() }
    }
}

#[derive(Debug, Error)]
pub enum InferError {
    #[error("support budget exceeded: training set has {size} rows, budget is {budget} (switch to ensemble mode)")]
    SupportBudgetExceeded { size: usize, budget: usize },
    #[error("invalid inference config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Final predictions for a test set.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions<F: Scalar> {
    Classification {
        /// n_test x K row-stochastic probabilities over the training label
        /// space.
        proba: Array2<F>,
        /// Argmax class indices (smallest index on ties).
        classes: Vec<usize>,
        /// Decoded label text per class index.
        class_labels: Vec<String>,
    },
    Regression {
        /// Values decoded back to the original target scale.
        values: Vec<F>,
    },
}

impl<F: Scalar> Predictions<F> {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Classification { classes, .. } => classes.len(),
            Predictions::Regression { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Predicted label text per test row.
    pub fn decoded(&self) -> Vec<String> {
        match self {
            Predictions::Classification { classes, class_labels, .. } => {
                classes.iter().map(|&c| class_labels[c].clone()).collect()
            }
            Predictions::Regression { values } => values.iter().map(|v| format!("{v}")).collect(),
        }
    }
}

/// Raw per-pass outputs before ensemble aggregation.
enum RawPrediction<F: Scalar> {
    Proba(Array2<F>),
    Reals(Vec<F>),
}

/// One full-context pass: the given support set against all query rows,
/// chunked to bound memory. Regression outputs are decoded through the
/// support-fitted target map.
fn predict_with_support<F: Scalar>(
    params: &ModelParams<F>,
    model_cfg: &ModelConfig,
    support: &Dataset,
    label_vocab: Option<&Vocab>,
    test: &Dataset,
    chunk_size: usize,
) -> Result<(RawPrediction<F>, PreprocessState<F>), InferError> {
    let opts = PreprocessOptions::with_max_features(model_cfg.max_features);
    let state = match (model_cfg.task, label_vocab) {
        (TaskKind::Classification, Some(vocab)) => {
            PreprocessState::<F>::fit_with_label_vocab(support, &opts, vocab.clone())?
        }
        _ => PreprocessState::<F>::fit(support, &opts)?,
    };
    if let Some(k) = state.n_classes() {
        if k > model_cfg.max_classes {
            return Err(InferError::InvalidConfig(format!(
                "training set has {k} classes, model supports {}",
                model_cfg.max_classes
            )));
        }
    }
    let x_support = state.transform_features(support)?;
    let y_support = state.transform_targets(support)?;
    let x_test = state.transform_features(test)?;
    let n_test = x_test.n_rows();
    let chunk = chunk_size.max(1);

    match model_cfg.task {
        TaskKind::Classification => {
            let k = state.n_classes().expect("classification state");
            let mut proba = Array2::zeros((n_test, k));
            let mut start = 0;
            while start < n_test {
                let end = (start + chunk).min(n_test);
                let idx: Vec<usize> = (start..end).collect();
                let episode = Episode::new(
                    x_support.clone(),
                    y_support.clone(),
                    x_test.select(&idx),
                    None,
                    Some(k),
                )?;
                let p = predict_proba(&episode, params, model_cfg)?;
                proba.slice_mut(ndarray::s![start..end, ..]).assign(&p);
                start = end;
            }
            Ok((RawPrediction::Proba(proba), state))
        }
        TaskKind::Regression => {
            let mut values = Vec::with_capacity(n_test);
            let mut start = 0;
            while start < n_test {
                let end = (start + chunk).min(n_test);
                let idx: Vec<usize> = (start..end).collect();
                let episode =
                    Episode::new(x_support.clone(), y_support.clone(), x_test.select(&idx), None, None)?;
                match forward(&episode, params, model_cfg)? {
                    Output::Reals(preds) => values.extend(preds.iter().copied()),
                    Output::Logits(_) => unreachable!("regression config"),
                }
                start = end;
            }
            let decoded = state.decode_regression(&values).expect("regression state");
            Ok((RawPrediction::Reals(decoded), state))
        }
    }
}

fn finalize_classification<F: Scalar>(proba: Array2<F>, vocab: &Vocab) -> Predictions<F> {
    let classes: Vec<usize> = proba
        .axis_iter(Axis(0))
        .map(|row| argmax_row(row.as_slice().expect("contiguous")))
        .collect();
    Predictions::Classification {
        proba,
        classes,
        class_labels: vocab.keys().to_vec(),
    }
}

/// Predict with the whole training set as support in one (chunked) pass.
pub fn predict_full_context<F: Scalar>(
    params: &ModelParams<F>,
    model_cfg: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    cfg: &InferenceConfig,
) -> Result<Predictions<F>, InferError> {
    if train.n_rows() > cfg.support_budget {
        return Err(InferError::SupportBudgetExceeded { size: train.n_rows(), budget: cfg.support_budget });
    }
    let (raw, state) = predict_with_support(params, model_cfg, train, None, test, cfg.chunk_size)?;
    Ok(match raw {
        RawPrediction::Proba(p) => finalize_classification(p, state.label_vocab().expect("classification")),
        RawPrediction::Reals(v) => Predictions::Regression { values: v },
    })
}

/// Classes present in a support subset (global label space indices).
fn support_class_presence<F: Scalar>(y: &Targets<F>, k: usize) -> Vec<bool> {
    let mut present = vec![false; k];
    if let Targets::Classes(ys) = y {
        for &c in ys {
            present[c] = true;
        }
    }
    present
}

/// Ensemble inference: average predictions over `n_ensembles` random support
/// subsets drawn without replacement. Probabilities are averaged (a member
/// contributes zero mass to classes absent from its subset) and renormalized.
pub fn predict_ensembled<F: Scalar>(
    params: &ModelParams<F>,
    model_cfg: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    cfg: &InferenceConfig,
) -> Result<Predictions<F>, InferError> {
    if cfg.subset_size > train.n_rows() {
        return Err(InferError::InvalidConfig(format!(
            "subset_size {} exceeds training-set size {}",
            cfg.subset_size,
            train.n_rows()
        )));
    }
    if cfg.subset_size == 0 || cfg.n_ensembles == 0 {
        return Err(InferError::InvalidConfig("subset_size and n_ensembles must be positive".into()));
    }
    if cfg.per_observation_subsets {
        return predict_ensembled_per_observation(params, model_cfg, train, test, cfg);
    }

    // Global label space so member probabilities are index-aligned.
    let global_vocab = match model_cfg.task {
        TaskKind::Classification => Some(Vocab::fit(&train.target_cells())),
        TaskKind::Regression => None,
    };

    let member_subset = |e: usize| -> Vec<usize> {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[e as u64]));
        let mut idx = rand::seq::index::sample(&mut rng, train.n_rows(), cfg.subset_size).into_vec();
        idx.sort_unstable();
        idx
    };

    let members: Vec<Result<RawPrediction<F>, InferError>> = (0..cfg.n_ensembles)
        .into_par_iter()
        .map(|e| {
            let subset = train.select_rows(&member_subset(e));
            let (raw, state) =
                predict_with_support(params, model_cfg, &subset, global_vocab.as_ref(), test, cfg.chunk_size)?;
            match raw {
                RawPrediction::Proba(mut proba) => {
                    let k = proba.ncols();
                    let y = state.transform_targets(&subset)?;
                    let present = support_class_presence(&y, k);
                    if present.iter().any(|p| !p) {
                        // Restrict the member's softmax to the classes its
                        // subset can actually see.
                        for mut row in proba.axis_iter_mut(Axis(0)) {
                            let mut total = F::zero();
                            for (c, v) in row.iter_mut().enumerate() {
                                if !present[c] {
                                    *v = F::zero();
                                }
                                total += *v;
                            }
                            if total > F::zero() {
                                for v in row.iter_mut() {
                                    *v /= total;
                                }
                            }
                        }
                    }
                    Ok(RawPrediction::Proba(proba))
                }
                reals => Ok(reals),
            }
        })
        .collect();

    // Fixed summation order by member index.
    aggregate_members(members, cfg.n_ensembles, train, model_cfg, global_vocab.as_ref())
}

fn aggregate_members<F: Scalar>(
    members: Vec<Result<RawPrediction<F>, InferError>>,
    n_members: usize,
    train: &Dataset,
    model_cfg: &ModelConfig,
    global_vocab: Option<&Vocab>,
) -> Result<Predictions<F>, InferError> {
    let inv = F::one() / F::from_count(n_members);
    match model_cfg.task {
        TaskKind::Classification => {
            let mut acc: Option<Array2<F>> = None;
            for m in members {
                let p = match m? {
                    RawPrediction::Proba(p) => p,
                    _ => unreachable!(),
                };
                acc = Some(match acc {
                    None => p,
                    Some(a) => a + p,
                });
            }
            let mut mean = acc.expect("at least one member") * inv;
            for mut row in mean.axis_iter_mut(Axis(0)) {
                let total: F = row.iter().copied().sum();
                if total > F::zero() {
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
            }
            let vocab = global_vocab
                .cloned()
                .unwrap_or_else(|| Vocab::fit(&train.target_cells()));
            Ok(finalize_classification(mean, &vocab))
        }
        TaskKind::Regression => {
            let mut acc: Option<Vec<F>> = None;
            for m in members {
                let v = match m? {
                    RawPrediction::Reals(v) => v,
                    _ => unreachable!(),
                };
                acc = Some(match acc {
                    None => v,
                    Some(mut a) => {
                        for (x, y) in a.iter_mut().zip(v.iter()) {
                            *x += *y;
                        }
                        a
                    }
                });
            }
            let values = acc.expect("at least one member").into_iter().map(|v| v * inv).collect();
            Ok(Predictions::Regression { values })
        }
    }
}

/// Slow path: a distinct subset per test observation and ensemble member.
fn predict_ensembled_per_observation<F: Scalar>(
    params: &ModelParams<F>,
    model_cfg: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    cfg: &InferenceConfig,
) -> Result<Predictions<F>, InferError> {
    let global_vocab = match model_cfg.task {
        TaskKind::Classification => Some(Vocab::fit(&train.target_cells())),
        TaskKind::Regression => None,
    };
    let rows: Vec<Result<RawPrediction<F>, InferError>> = (0..test.n_rows())
        .into_par_iter()
        .map(|ti| {
            let single = test.select_rows(&[ti]);
            let members: Vec<Result<RawPrediction<F>, InferError>> = (0..cfg.n_ensembles)
                .map(|e| {
                    let mut rng =
                        rng_from_seed(derive_seed(cfg.seed, &[ti as u64, e as u64]));
                    let mut idx =
                        rand::seq::index::sample(&mut rng, train.n_rows(), cfg.subset_size).into_vec();
                    idx.sort_unstable();
                    let subset = train.select_rows(&idx);
                    let (raw, _) = predict_with_support(
                        params,
                        model_cfg,
                        &subset,
                        global_vocab.as_ref(),
                        &single,
                        cfg.chunk_size,
                    )?;
                    Ok(raw)
                })
                .collect();
            let agg = aggregate_members(members, cfg.n_ensembles, train, model_cfg, global_vocab.as_ref())?;
            Ok(match agg {
                Predictions::Classification { proba, .. } => RawPrediction::Proba(proba),
                Predictions::Regression { values } => RawPrediction::Reals(values),
            })
        })
        .collect();

    match model_cfg.task {
        TaskKind::Classification => {
            let mut parts = Vec::with_capacity(test.n_rows());
            for r in rows {
                match r? {
                    RawPrediction::Proba(p) => parts.push(p),
                    _ => unreachable!(),
                }
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let proba = ndarray::concatenate(Axis(0), &views).expect("consistent widths");
            let vocab = global_vocab.expect("classification");
            Ok(finalize_classification(proba, &vocab))
        }
        TaskKind::Regression => {
            let mut values = Vec::with_capacity(test.n_rows());
            for r in rows {
                match r? {
                    RawPrediction::Reals(v) => values.extend(v),
                    _ => unreachable!(),
                }
            }
            Ok(Predictions::Regression { values })
        }
    }
}

/// Mode dispatch per the inference config.
pub fn predict<F: Scalar>(
    params: &ModelParams<F>,
    model_cfg: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    cfg: &InferenceConfig,
) -> Result<Predictions<F>, InferError> {
    match cfg.mode {
        InferenceMode::FullContext => predict_full_context(params, model_cfg, train, test, cfg),
        InferenceMode::Ensemble => predict_ensembled(params, model_cfg, train, test, cfg),
    }
}

/// Write predictions as CSV: `pred` plus `p_0..p_{K-1}` for classification,
/// `pred` alone for regression.
pub fn write_predictions_csv<F: Scalar>(path: &Path, preds: &Predictions<F>) -> Result<(), InferError> {
    let mut w = csv::Writer::from_path(path)?;
    match preds {
        Predictions::Classification { proba, classes, class_labels } => {
            let k = proba.ncols();
            let mut header = vec!["pred".to_string()];
            header.extend((0..k).map(|c| format!("p_{c}")));
            w.write_record(&header)?;
            for (i, &c) in classes.iter().enumerate() {
                let mut rec = vec![class_labels[c].clone()];
                rec.extend(proba.row(i).iter().map(|v| format!("{v}")));
                w.write_record(&rec)?;
            }
        }
        Predictions::Regression { values } => {
            w.write_record(["pred"])?;
            for v in values {
                w.write_record([format!("{v}")])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Cell, ColumnSchema};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn cls_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            n_layers: 1,
            n_heads: 2,
            feedforward_dim: 16,
            max_features: 4,
            max_classes: 3,
            task: TaskKind::Classification,
            query_self_attend: true,
        }
    }

    fn reg_config() -> ModelConfig {
        ModelConfig { task: TaskKind::Regression, ..cls_config() }
    }

    fn random_head_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
        let mut p = ModelParams::init(cfg, seed).unwrap();
        let mut rng = rng_from_seed(seed ^ 0xabc);
        p.head_w.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        p
    }

    /// n rows, 2 features; first half labeled "a", second half "b".
    fn two_block_dataset(n: usize) -> Dataset {
        let schema = vec![
            ColumnSchema::numeric("x0"),
            ColumnSchema::numeric("x1"),
            ColumnSchema::categorical("y").target(),
        ];
        let mut rng = rng_from_seed(500 + n as u64);
        let rows = (0..n)
            .map(|i| {
                let label = if i < n / 2 { "a" } else { "b" };
                vec![
                    Cell::Num(rng.gen_range(-1.0..1.0)),
                    Cell::Num(rng.gen_range(-1.0..1.0)),
                    Cell::Text(label.into()),
                ]
            })
            .collect();
        Dataset::new(schema, rows, TaskKind::Classification).unwrap()
    }

    fn regression_dataset(n: usize, seed: u64) -> Dataset {
        let schema = vec![
            ColumnSchema::numeric("x0"),
            ColumnSchema::numeric("x1"),
            ColumnSchema::numeric("y").target(),
        ];
        let mut rng = rng_from_seed(seed);
        let rows = (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                vec![Cell::Num(a), Cell::Num(b), Cell::Num(2.0 * a - b)]
            })
            .collect();
        Dataset::new(schema, rows, TaskKind::Regression).unwrap()
    }

    #[test]
    fn budget_boundary_is_enforced() {
        let cfg = cls_config();
        let p = random_head_params(&cfg, 1);
        let ds = two_block_dataset(12);
        let mut inf = InferenceConfig::full_context();
        inf.support_budget = 11;
        let err = predict_full_context(&p, &cfg, &ds, &ds, &inf).unwrap_err();
        assert!(matches!(err, InferError::SupportBudgetExceeded { size: 12, budget: 11 }));
        inf.support_budget = 12;
        assert!(predict_full_context(&p, &cfg, &ds, &ds, &inf).is_ok());
    }

    #[test]
    fn default_budget_is_ten_thousand() {
        assert_eq!(InferenceConfig::full_context().support_budget, 10_000);
        assert_eq!(InferenceConfig::full_context().subset_size, 1000);
        assert_eq!(InferenceConfig::full_context().n_ensembles, 10);
    }

    #[test]
    fn chunked_and_unchunked_outputs_agree() {
        let cfg = cls_config();
        let p = random_head_params(&cfg, 2);
        let train = two_block_dataset(16);
        let test = two_block_dataset(9);
        let mut inf = InferenceConfig::full_context();
        inf.chunk_size = 1024;
        let whole = predict_full_context(&p, &cfg, &train, &test, &inf).unwrap();
        inf.chunk_size = 2;
        let chunked = predict_full_context(&p, &cfg, &train, &test, &inf).unwrap();
        match (&whole, &chunked) {
            (
                Predictions::Classification { proba: a, .. },
                Predictions::Classification { proba: b, .. },
            ) => {
                for (x, y) in a.iter().zip(b.iter()) {
                    let denom = x.abs().max(y.abs()).max(1e-300);
                    assert!((x - y).abs() / denom < 1e-12);
                }
            }
            _ => panic!("classification expected"),
        }
    }

    #[test]
    fn degenerate_ensemble_matches_full_context() {
        let cfg = cls_config();
        let p = random_head_params(&cfg, 3);
        let train = two_block_dataset(14);
        let test = two_block_dataset(5);
        let full = predict_full_context(&p, &cfg, &train, &test, &InferenceConfig::full_context()).unwrap();
        let mut inf = InferenceConfig::ensemble(train.n_rows(), 1);
        inf.seed = 9;
        let ens = predict_ensembled(&p, &cfg, &train, &test, &inf).unwrap();
        match (&full, &ens) {
            (
                Predictions::Classification { proba: a, .. },
                Predictions::Classification { proba: b, .. },
            ) => {
                for (x, y) in a.iter().zip(b.iter()) {
                    let denom = x.abs().max(y.abs()).max(1e-300);
                    assert!((x - y).abs() / denom < 1e-5, "{x} vs {y}");
                }
            }
            _ => panic!("classification expected"),
        }
    }

    #[test]
    fn ensemble_is_seed_deterministic() {
        let cfg = cls_config();
        let p = random_head_params(&cfg, 4);
        let train = two_block_dataset(14);
        let test = two_block_dataset(4);
        let mut inf = InferenceConfig::ensemble(7, 4);
        inf.seed = 11;
        let a = predict_ensembled(&p, &cfg, &train, &test, &inf).unwrap();
        let b = predict_ensembled(&p, &cfg, &train, &test, &inf).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn averaged_probabilities_match_external_member_mean() {
        let cfg = cls_config();
        let p = random_head_params(&cfg, 5);
        let train = two_block_dataset(12);
        let test = two_block_dataset(6);
        // subset_size 7 pigeonholes both label blocks into every subset and
        // keeps first-appearance order stable, so public full-context on the
        // same subset reproduces each member exactly.
        let mut inf = InferenceConfig::ensemble(7, 3);
        inf.seed = 21;
        let ens = predict_ensembled(&p, &cfg, &train, &test, &inf).unwrap();

        let mut mean: Option<Array2<f64>> = None;
        for e in 0..3u64 {
            let mut rng = rng_from_seed(derive_seed(inf.seed, &[e]));
            let mut idx = rand::seq::index::sample(&mut rng, train.n_rows(), 7).into_vec();
            idx.sort_unstable();
            let member = predict_full_context(
                &p,
                &cfg,
                &train.select_rows(&idx),
                &test,
                &InferenceConfig::full_context(),
            )
            .unwrap();
            if let Predictions::Classification { proba, .. } = member {
                mean = Some(match mean {
                    None => proba,
                    Some(acc) => acc + proba,
                });
            }
        }
        let mean = mean.unwrap() / 3.0;
        match ens {
            Predictions::Classification { proba, .. } => {
                for (x, y) in proba.iter().zip(mean.iter()) {
                    let denom: f64 = x.abs().max(y.abs()).max(1e-300);
                    assert!((x - y).abs() / denom < 1e-12, "{x} vs {y}");
                }
            }
            _ => panic!("classification expected"),
        }
    }

    #[test]
    fn averaged_regression_matches_external_member_mean() {
        let cfg = reg_config();
        let p = random_head_params(&cfg, 6);
        let train = regression_dataset(12, 1);
        let test = regression_dataset(5, 2);
        let mut inf = InferenceConfig::ensemble(8, 3);
        inf.seed = 31;
        let ens = predict_ensembled(&p, &cfg, &train, &test, &inf).unwrap();

        let mut mean = vec![0.0f64; test.n_rows()];
        for e in 0..3u64 {
            let mut rng = rng_from_seed(derive_seed(inf.seed, &[e]));
            let mut idx = rand::seq::index::sample(&mut rng, train.n_rows(), 8).into_vec();
            idx.sort_unstable();
            let member = predict_full_context(
                &p,
                &cfg,
                &train.select_rows(&idx),
                &test,
                &InferenceConfig::full_context(),
            )
            .unwrap();
            if let Predictions::Regression { values } = member {
                for (m, v) in mean.iter_mut().zip(values.iter()) {
                    *m += v / 3.0;
                }
            }
        }
        match ens {
            Predictions::Regression { values } => {
                for (x, y) in values.iter().zip(mean.iter()) {
                    assert!((x - y).abs() < 1e-12, "{x} vs {y}");
                }
            }
            _ => panic!("regression expected"),
        }
    }

    #[test]
    fn probability_rows_are_valid_distributions() {
        let cfg = cls_config();
        let p = random_head_params(&cfg, 7);
        let train = two_block_dataset(12);
        let test = two_block_dataset(7);
        for preds in [
            predict_full_context(&p, &cfg, &train, &test, &InferenceConfig::full_context()).unwrap(),
            predict_ensembled(&p, &cfg, &train, &test, &{
                let mut c = InferenceConfig::ensemble(5, 4);
                c.seed = 3;
                c
            })
            .unwrap(),
        ] {
            if let Predictions::Classification { proba, .. } = preds {
                for row in proba.axis_iter(ndarray::Axis(0)) {
                    assert!(row.iter().all(|&v| v >= 0.0));
                    let sum: f64 = row.sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn oversized_subset_is_rejected() {
        let cfg = cls_config();
        let p = random_head_params(&cfg, 8);
        let train = two_block_dataset(10);
        let err =
            predict_ensembled(&p, &cfg, &train, &train, &InferenceConfig::ensemble(11, 2)).unwrap_err();
        assert!(matches!(err, InferError::InvalidConfig(_)));
    }

    #[test]
    fn per_observation_subsets_run_and_are_deterministic() {
        let cfg = cls_config();
        let p = random_head_params(&cfg, 9);
        let train = two_block_dataset(12);
        let test = two_block_dataset(3);
        let mut inf = InferenceConfig::ensemble(7, 2);
        inf.per_observation_subsets = true;
        inf.seed = 5;
        let a = predict_ensembled(&p, &cfg, &train, &test, &inf).unwrap();
        let b = predict_ensembled(&p, &cfg, &train, &test, &inf).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn predictions_csv_has_the_documented_header() {
        let cfg = cls_config();
        let p = random_head_params(&cfg, 10);
        let train = two_block_dataset(10);
        let test = two_block_dataset(4);
        let preds = predict_full_context(&p, &cfg, &train, &test, &InferenceConfig::full_context()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_predictions_csv(f.path(), &preds).unwrap();
        let content = std::fs::read_to_string(f.path()).unwrap();
        let mut lines = content.lines();
        assert_eq!(lines.next().unwrap(), "pred,p_0,p_1");
        assert_eq!(lines.count(), 4);

        let rcfg = reg_config();
        let rp = random_head_params(&rcfg, 11);
        let rtrain = regression_dataset(10, 3);
        let rpreds =
            predict_full_context(&rp, &rcfg, &rtrain, &rtrain, &InferenceConfig::full_context()).unwrap();
        let f2 = tempfile::NamedTempFile::new().unwrap();
        write_predictions_csv(f2.path(), &rpreds).unwrap();
        let content = std::fs::read_to_string(f2.path()).unwrap();
        assert!(content.starts_with("pred\n"));
    }
}
