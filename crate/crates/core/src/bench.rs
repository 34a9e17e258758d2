//! Metrics, per-dataset score normalization, and the variant comparison
//! report.
//!
//! `compare_variants` runs every (dataset, variant, seed) cell under a shared
//! seed protocol: the train/test split and validation carve-out depend only
//! on (dataset, seed), so all variants see identical data. Cells run
//! concurrently; the table assembly is a single-writer reduction over a
//! fixed cell order.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{train_test_split, DataError, Dataset, SplitSpec, TaskKind};
use crate::infer::{predict, InferError, InferenceConfig, InferenceMode, Predictions};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::train::{carve_validation, finetune, train_scratch, Regime, TrainConfig, TrainError, TrainOverrides};

pub mod suite;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("length mismatch: {a} predictions for {b} targets")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("insufficient variants: {0}")]
    InsufficientVariants(usize),
    #[error("variant '{0}' needs pretrained parameters, none were provided")]
    MissingPretrained(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Raw metric value plus the test-set size it was computed on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub value: f64,
    pub n_test: usize,
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<Metrics, BenchError> {
    if preds.len() != truth.len() {
        return Err(BenchError::LengthMismatch { a: preds.len(), b: truth.len() });
    }
    if preds.is_empty() {
        return Err(BenchError::TooFewSamples { need: 1, got: 0 });
    }
    let correct = preds.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
    Ok(Metrics { value: correct as f64 / preds.len() as f64, n_test: preds.len() })
}

/// Coefficient of determination, 1 - SS_res/SS_tot. When SS_tot is zero the
/// score is 1 for exact predictions and 0 otherwise.
pub fn r2_score(preds: &[f64], truth: &[f64]) -> Result<Metrics, BenchError> {
    if preds.len() != truth.len() {
        return Err(BenchError::LengthMismatch { a: preds.len(), b: truth.len() });
    }
    if preds.len() < 2 {
        return Err(BenchError::TooFewSamples { need: 2, got: preds.len() });
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = preds.iter().zip(truth.iter()).map(|(p, y)| (p - y) * (p - y)).sum();
    let value = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(Metrics { value, n_test: preds.len() })
}

/// Which trained parameters a variant evaluates with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantRegime {
    /// Zero-shot in-context learning with the pretrained checkpoint.
    Icl,
    /// Fine-tune the pretrained checkpoint per dataset.
    Finetune,
    /// Train from scratch per dataset.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub id: String,
    pub regime: VariantRegime,
    pub inference: InferenceConfig,
    #[serde(default)]
    pub train: TrainOverrides,
}

impl VariantConfig {
    pub fn retrieval_label(&self) -> String {
        match self.inference.mode {
            InferenceMode::FullContext => "full".to_string(),
            InferenceMode::Ensemble => {
                format!("{}x{}", self.inference.n_ensembles, self.inference.subset_size)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub variants: Vec<VariantConfig>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_n_seeds() -> usize {
    1
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_validation_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone)]
pub struct BenchDataset {
    pub id: String,
    pub data: Dataset,
}

/// Raw and normalized scores for every (dataset, variant) cell.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub dataset_ids: Vec<String>,
    pub dataset_tasks: Vec<TaskKind>,
    pub variants: Vec<VariantConfig>,
    /// Seed-averaged raw metric per cell; NaN marks a failed cell.
    pub raw: Array2<f64>,
    /// Per-dataset min-max normalized scores (filled by `normalize_scores`).
    pub normalized: Option<Array2<f64>>,
    pub warnings: Vec<String>,
}

impl ScoreTable {
    /// Mean normalized score of one variant over the datasets of a task
    /// kind; `None` when the category is empty for that variant.
    pub fn aggregate(&self, task: TaskKind, variant: usize) -> Option<f64> {
        let normalized = self.normalized.as_ref()?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (d, &t) in self.dataset_tasks.iter().enumerate() {
            if t == task && normalized[(d, variant)].is_finite() {
                sum += normalized[(d, variant)];
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }
}

/// Per-dataset min-max normalization across variants. Datasets where every
/// variant scored identically normalize to 1; failed cells stay NaN and are
/// excluded from min/max.
pub fn normalize_scores(table: &ScoreTable) -> Result<ScoreTable, BenchError> {
    if table.variants.is_empty() {
        return Err(BenchError::InsufficientVariants(0));
    }
    let (n_d, n_v) = table.raw.dim();
    let mut normalized = Array2::from_elem((n_d, n_v), f64::NAN);
    let mut out = table.clone();
    for d in 0..n_d {
        let finite: Vec<f64> = (0..n_v).map(|v| table.raw[(d, v)]).filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            out.warnings.push(format!(
                "dataset '{}' has no finite scores and is excluded from aggregation",
                table.dataset_ids[d]
            ));
            continue;
        }
        let min = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in 0..n_v {
            let raw = table.raw[(d, v)];
            if !raw.is_finite() {
                continue;
            }
            normalized[(d, v)] = if max == min { 1.0 } else { (raw - min) / (max - min) };
        }
    }
    out.normalized = Some(normalized);
    Ok(out)
}

fn accuracy_on_labels(pred_labels: &[String], test: &Dataset) -> f64 {
    let t = test.target_index();
    let mut correct = 0usize;
    for (i, row) in test.rows.iter().enumerate() {
        if let Some(key) = row[t].key() {
            if key == pred_labels[i] {
                correct += 1;
            }
        }
    }
    correct as f64 / test.n_rows() as f64
}

fn truth_values(test: &Dataset) -> Vec<f64> {
    let t = test.target_index();
    test.rows
        .iter()
        .map(|r| match &r[t] {
            crate::dataio::Cell::Num(v) => *v,
            _ => f64::NAN,
        })
        .collect()
}

/// One (dataset, variant, seed) evaluation.
fn run_cell<F: Scalar>(
    ds: &BenchDataset,
    variant: &VariantConfig,
    model_cfg: &ModelConfig,
    pretrained: Option<&ModelParams<F>>,
    cfg: &BenchConfig,
    d_idx: usize,
    v_idx: usize,
    seed_idx: usize,
) -> Result<f64, BenchError> {
    let task = ds.data.task;
    let task_cfg = ModelConfig { task, ..model_cfg.clone() };

    // The split and validation carve-out are shared by all variants.
    let split_seed = derive_seed(cfg.base_seed, &[d_idx as u64, seed_idx as u64, 1000]);
    let (train, test) = train_test_split(&ds.data, &SplitSpec::new(cfg.train_fraction, split_seed))?;
    let cell_seed = derive_seed(cfg.base_seed, &[d_idx as u64, v_idx as u64, seed_idx as u64]);

    let adapt = |p: &ModelParams<F>| -> ModelParams<F> {
        if model_cfg.task == task {
            p.clone()
        } else {
            p.clone().with_task_head(task, task_cfg.max_classes)
        }
    };

    let params = match variant.regime {
        VariantRegime::Icl => {
            let p = pretrained.ok_or_else(|| BenchError::MissingPretrained(variant.id.clone()))?;
            adapt(p)
        }
        VariantRegime::Finetune => {
            let p = pretrained.ok_or_else(|| BenchError::MissingPretrained(variant.id.clone()))?;
            let val_seed = derive_seed(cfg.base_seed, &[d_idx as u64, seed_idx as u64, 2000]);
            let (train_part, val_part) = carve_validation(&train, cfg.validation_fraction, val_seed)?;
            let mut tc = variant.train.apply(TrainConfig::new(Regime::Finetune));
            tc.seed = cell_seed;
            let (best, _) = finetune(adapt(p), &task_cfg, &train_part, &val_part, &tc, None)?;
            best
        }
        VariantRegime::Scratch => {
            let val_seed = derive_seed(cfg.base_seed, &[d_idx as u64, seed_idx as u64, 2000]);
            let (train_part, val_part) = carve_validation(&train, cfg.validation_fraction, val_seed)?;
            let mut tc = variant.train.apply(TrainConfig::new(Regime::Scratch));
            tc.seed = cell_seed;
            let (best, _) = train_scratch::<F>(&task_cfg, &train_part, &val_part, &tc, None)?;
            best
        }
    };

    // Evaluation uses the whole training split as support.
    let mut inference = variant.inference.clone();
    inference.seed = derive_seed(cell_seed, &[5]);
    let predictions = predict(&params, &task_cfg, &train, &test, &inference)?;

    match (task, &predictions) {
        (TaskKind::Classification, _) => Ok(accuracy_on_labels(&predictions.decoded(), &test)),
        (TaskKind::Regression, Predictions::Regression { values }) => {
            let preds: Vec<f64> = values.iter().map(|v| v.into_f64()).collect();
            Ok(r2_score(&preds, &truth_values(&test))?.value)
        }
        _ => unreachable!("prediction kind follows the task"),
    }
}

/// Run every variant on every dataset under a shared seed protocol and emit
/// the score table. Failed cells are excluded from normalization and listed
/// in `warnings`.
pub fn compare_variants<F: Scalar>(
    datasets: &[BenchDataset],
    model_cfg: &ModelConfig,
    pretrained: Option<&ModelParams<F>>,
    cfg: &BenchConfig,
    out_dir: Option<&Path>,
) -> Result<ScoreTable, BenchError> {
    if cfg.variants.is_empty() {
        return Err(BenchError::InsufficientVariants(0));
    }
    let n_seeds = cfg.n_seeds.max(1);

    let cells: Vec<(usize, usize, usize)> = (0..datasets.len())
        .flat_map(|d| (0..cfg.variants.len()).flat_map(move |v| (0..n_seeds).map(move |s| (d, v, s))))
        .collect();

    let results: Vec<((usize, usize, usize), Result<f64, BenchError>)> = cells
        .into_par_iter()
        .map(|(d, v, s)| {
            let r = run_cell(&datasets[d], &cfg.variants[v], model_cfg, pretrained, cfg, d, v, s);
            ((d, v, s), r)
        })
        .collect();

    let mut sums = Array2::<f64>::zeros((datasets.len(), cfg.variants.len()));
    let mut counts = Array2::<usize>::zeros((datasets.len(), cfg.variants.len()));
    let mut warnings = Vec::new();
    for ((d, v, s), r) in results {
        match r {
            Ok(value) => {
                sums[(d, v)] += value;
                counts[(d, v)] += 1;
            }
            Err(e) => warnings.push(format!(
                "cell (dataset '{}', variant '{}', seed {s}) failed: {e}",
                datasets[d].id, cfg.variants[v].id
            )),
        }
    }
    let raw = Array2::from_shape_fn((datasets.len(), cfg.variants.len()), |(d, v)| {
        if counts[(d, v)] > 0 {
            sums[(d, v)] / counts[(d, v)] as f64
        } else {
            f64::NAN
        }
    });

    let table = ScoreTable {
        dataset_ids: datasets.iter().map(|d| d.id.clone()).collect(),
        dataset_tasks: datasets.iter().map(|d| d.data.task).collect(),
        variants: cfg.variants.clone(),
        raw,
        normalized: None,
        warnings,
    };
    let table = normalize_scores(&table)?;
    if let Some(dir) = out_dir {
        write_reports(&table, dir)?;
    }
    Ok(table)
}

/// Emit `report.csv`, `report.txt` and `aggregate.csv` into a directory.
pub fn write_reports(table: &ScoreTable, dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;
    let normalized = table.normalized.as_ref();

    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    w.write_record(["dataset", "variant", "raw", "normalized"])?;
    for (d, id) in table.dataset_ids.iter().enumerate() {
        for (v, variant) in table.variants.iter().enumerate() {
            let raw = table.raw[(d, v)];
            let norm = normalized.map_or(f64::NAN, |n| n[(d, v)]);
            let fmt = |x: f64| if x.is_finite() { format!("{x}") } else { "FAIL".to_string() };
            w.write_record([id.as_str(), variant.id.as_str(), &fmt(raw), &fmt(norm)])?;
        }
    }
    w.flush()?;

    let mut a = csv::Writer::from_path(dir.join("aggregate.csv"))?;
    a.write_record(["variant", "category", "mean_normalized"])?;
    for (v, variant) in table.variants.iter().enumerate() {
        for task in [TaskKind::Classification, TaskKind::Regression] {
            if let Some(mean) = table.aggregate(task, v) {
                a.write_record([variant.id.as_str(), &task.to_string(), &format!("{mean}")])?;
            }
        }
    }
    a.flush()?;

    std::fs::write(dir.join("report.txt"), render_table(table))?;
    Ok(())
}

/// Aligned plain-text table: one row per variant with its pretrain /
/// fine-tune flags, retrieval size and per-category aggregates.
pub fn render_table(table: &ScoreTable) -> String {
    let has_cls = table.dataset_tasks.iter().any(|t| *t == TaskKind::Classification);
    let has_reg = table.dataset_tasks.iter().any(|t| *t == TaskKind::Regression);

    let mut header: Vec<String> =
        ["method", "pretrain", "fine-tune", "retrieval"].iter().map(|s| s.to_string()).collect();
    if has_cls {
        header.push("classification".into());
    }
    if has_reg {
        header.push("regression".into());
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (v, variant) in table.variants.iter().enumerate() {
        let (pretrain, finetune) = match variant.regime {
            VariantRegime::Icl => (true, false),
            VariantRegime::Finetune => (true, true),
            VariantRegime::Scratch => (false, false),
        };
        let flag = |b: bool| if b { "yes" } else { "no" }.to_string();
        let score = |task: TaskKind| {
            table
                .aggregate(task, v)
                .map_or("-".to_string(), |m| format!("{m:.4}"))
        };
        let mut row = vec![variant.id.clone(), flag(pretrain), flag(finetune), variant.retrieval_label()];
        if has_cls {
            row.push(score(TaskKind::Classification));
        }
        if has_reg {
            row.push(score(TaskKind::Regression));
        }
        rows.push(row);
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let write_row = |out: &mut String, row: &[String]| {
        for (c, cell) in row.iter().enumerate() {
            let _ = write!(out, "{cell:<width$}", width = widths[c] + 2);
        }
        let _ = writeln!(out);
    };
    write_row(&mut out, &header);
    let rule: usize = widths.iter().map(|w| w + 2).sum();
    let _ = writeln!(out, "{}", "-".repeat(rule));
    for row in &rows {
        write_row(&mut out, row);
    }
    if !table.warnings.is_empty() {
        let _ = writeln!(out);
        for warning in &table.warnings {
            let _ = writeln!(out, "! {warning}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    #[test]
    fn accuracy_trivials() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap().value, 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap().value, 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap().value, 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(BenchError::LengthMismatch { .. })));
    }

    #[test]
    fn r2_closed_forms() {
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1. , 2., 3.]).unwrap().value, 1.0);
        let truth = [1.0, 2.0, 3.0];
        let mean_preds = [2.0, 2.0, 2.0];
        assert_eq!(r2_score(&mean_preds, &truth).unwrap().value, 0.0);
        assert!((r2_score(&[1.0, 2.0, 4.0], &truth).unwrap().value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn r2_degenerate_rule() {
        assert_eq!(r2_score(&[5.0, 5.0], &[5.0, 5.0]).unwrap().value, 1.0);
        assert_eq!(r2_score(&[5.0, 6.0], &[5.0, 5.0]).unwrap().value, 0.0);
        assert!(matches!(r2_score(&[1.0], &[1.0]), Err(BenchError::TooFewSamples { .. })));
    }

    fn table_from_raw(raw: Array2<f64>, tasks: Vec<TaskKind>) -> ScoreTable {
        let n_v = raw.ncols();
        ScoreTable {
            dataset_ids: (0..raw.nrows()).map(|d| format!("d{d}")).collect(),
            dataset_tasks: tasks,
            variants: (0..n_v)
                .map(|v| VariantConfig {
                    id: format!("v{v}"),
                    regime: VariantRegime::Icl,
                    inference: InferenceConfig::full_context(),
                    train: TrainOverrides::default(),
                })
                .collect(),
            raw,
            normalized: None,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn two_point_min_max() {
        let raw = ndarray::array![[0.6, 0.8]];
        let t = normalize_scores(&table_from_raw(raw, vec![TaskKind::Classification])).unwrap();
        let n = t.normalized.unwrap();
        assert_eq!(n[(0, 0)], 0.0);
        assert_eq!(n[(0, 1)], 1.0);
    }

    #[test]
    fn constant_scores_normalize_to_one() {
        let raw = ndarray::array![[0.7, 0.7, 0.7]];
        let t = normalize_scores(&table_from_raw(raw, vec![TaskKind::Classification])).unwrap();
        let n = t.normalized.unwrap();
        for v in 0..3 {
            assert_eq!(n[(0, v)], 1.0);
        }
    }

    #[test]
    fn three_point_min_max() {
        let raw = ndarray::array![[0.5, 0.6, 0.8]];
        let t = normalize_scores(&table_from_raw(raw, vec![TaskKind::Classification])).unwrap();
        let n = t.normalized.unwrap();
        assert_eq!(n[(0, 0)], 0.0);
        assert!((n[(0, 1)] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(n[(0, 2)], 1.0);
    }

    #[test]
    fn normalization_bounds_and_argmax_preservation() {
        let mut rng = rng_from_seed(17);
        for _ in 0..50 {
            let raw = Array2::from_shape_fn((4, 3), |_| rng.gen_range(0.0..1.0));
            let t = normalize_scores(&table_from_raw(raw.clone(), vec![TaskKind::Classification; 4])).unwrap();
            let n = t.normalized.unwrap();
            for d in 0..4 {
                let mut best_raw = 0;
                let mut best_norm = 0;
                for v in 0..3 {
                    assert!((0.0..=1.0).contains(&n[(d, v)]));
                    if raw[(d, v)] > raw[(d, best_raw)] {
                        best_raw = v;
                    }
                    if n[(d, v)] > n[(d, best_norm)] {
                        best_norm = v;
                    }
                }
                assert_eq!(best_raw, best_norm);
                assert_eq!(n[(d, best_raw)], 1.0);
            }
        }
    }

    #[test]
    fn dataset_order_does_not_change_aggregates() {
        let raw = ndarray::array![[0.5, 0.9], [0.2, 0.1], [0.7, 0.7]];
        let tasks = vec![TaskKind::Classification; 3];
        let t1 = normalize_scores(&table_from_raw(raw.clone(), tasks.clone())).unwrap();
        let permuted = ndarray::array![[0.7, 0.7], [0.5, 0.9], [0.2, 0.1]];
        let t2 = normalize_scores(&table_from_raw(permuted, tasks)).unwrap();
        for v in 0..2 {
            let a = t1.aggregate(TaskKind::Classification, v).unwrap();
            let b = t2.aggregate(TaskKind::Classification, v).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn failed_cells_are_excluded_not_zeroed() {
        let raw = ndarray::array![[0.5, f64::NAN, 0.9]];
        let t = normalize_scores(&table_from_raw(raw, vec![TaskKind::Classification])).unwrap();
        let n = t.normalized.unwrap();
        assert_eq!(n[(0, 0)], 0.0);
        assert!(n[(0, 1)].is_nan());
        assert_eq!(n[(0, 2)], 1.0);
    }

    #[test]
    fn empty_variant_list_is_insufficient() {
        let raw = Array2::from_elem((1, 0), 0.0);
        assert!(matches!(
            normalize_scores(&table_from_raw(raw, vec![TaskKind::Classification])),
            Err(BenchError::InsufficientVariants(0))
        ));
    }
}
