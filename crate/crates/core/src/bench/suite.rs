//! Deterministic synthetic task suites for the comparison harness.
//!
//! Classification tasks cycle through four archetypes with different
//! boundary structure (centroid blobs, an XOR pair, radial rings, projection
//! bands) plus label noise and distractor features, so in-context accuracy
//! is well away from both chance and saturation and support size matters.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::BenchDataset;
use crate::dataio::{Cell, ColumnSchema, Dataset, TaskKind};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
    #[serde(default = "default_min_rows")]
    pub min_rows: usize,
    #[serde(default = "default_max_rows")]
    pub max_rows: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_tasks() -> usize {
    10
}
fn default_min_rows() -> usize {
    500
}
fn default_max_rows() -> usize {
    2000
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { n_tasks: default_n_tasks(), min_rows: default_min_rows(), max_rows: default_max_rows(), seed: 0 }
    }
}

fn standard<R: rand::Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn flip_labels(labels: &mut [usize], k: usize, p: f64, rng: &mut Rng) {
    for l in labels.iter_mut() {
        if rng.gen_range(0.0..1.0) < p {
            *l = rng.gen_range(0..k);
        }
    }
}

fn quantile_thresholds(values: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1..k)
        .map(|i| {
            let pos = i as f64 / k as f64 * (sorted.len() - 1) as f64;
            sorted[pos.round() as usize]
        })
        .collect()
}

fn digitize(v: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().filter(|&&t| v > t).count()
}

/// Gaussian blobs labeled by their component, one feature re-expressed as a
/// categorical bucket column.
fn centroid_task(rows: usize, rng: &mut Rng) -> Dataset {
    let d = rng.gen_range(4..=6);
    let k = 3;
    let centroids: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 2.2 * standard(rng)).collect()).collect();
    let mut x = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let c = rng.gen_range(0..k);
        x.push((0..d).map(|j| centroids[c][j] + 1.1 * standard(rng)).collect::<Vec<f64>>());
        labels.push(c);
    }
    flip_labels(&mut labels, k, 0.05, rng);

    // Bucket feature 0 into four ordered categories.
    let col0: Vec<f64> = x.iter().map(|r| r[0]).collect();
    let buckets = quantile_thresholds(&col0, 4);
    let mut schema: Vec<ColumnSchema> = vec![ColumnSchema::categorical("f0")];
    schema.extend((1..d).map(|j| ColumnSchema::numeric(&format!("f{j}"))));
    schema.push(ColumnSchema::categorical("target").target());
    let dataset_rows = x
        .iter()
        .zip(labels.iter())
        .map(|(r, &l)| {
            let mut cells = vec![Cell::Text(format!("q{}", digitize(r[0], &buckets)))];
            cells.extend(r.iter().skip(1).map(|&v| Cell::Num(v)));
            cells.push(Cell::Text(l.to_string()));
            cells
        })
        .collect();
    Dataset::new(schema, dataset_rows, TaskKind::Classification).expect("valid schema")
}

/// XOR of two thresholded coordinates, buried among distractors.
fn xor_task(rows: usize, rng: &mut Rng) -> Dataset {
    let d = rng.gen_range(4..=6);
    let theta0 = 0.3 * standard(rng);
    let theta1 = 0.3 * standard(rng);
    let mut x = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row: Vec<f64> = (0..d).map(|_| standard(rng)).collect();
        let l = usize::from((row[0] > theta0) ^ (row[1] > theta1));
        x.push(row);
        labels.push(l);
    }
    flip_labels(&mut labels, 2, 0.04, rng);
    numeric_dataset(x, labels)
}

/// Concentric radial bands around a random center in two informative
/// dimensions.
fn rings_task(rows: usize, rng: &mut Rng) -> Dataset {
    let d = rng.gen_range(4..=6);
    let k = 3;
    let cx = 0.5 * standard(rng);
    let cy = 0.5 * standard(rng);
    let mut x = Vec::with_capacity(rows);
    let mut radii = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row: Vec<f64> = (0..d).map(|_| standard(rng)).collect();
        radii.push(((row[0] - cx).powi(2) + (row[1] - cy).powi(2)).sqrt());
        x.push(row);
    }
    let thresholds = quantile_thresholds(&radii, k);
    let mut labels: Vec<usize> = radii.iter().map(|&r| digitize(r, &thresholds)).collect();
    flip_labels(&mut labels, k, 0.04, rng);
    numeric_dataset(x, labels)
}

/// Bands of a nonlinear scalar projection (closest to the pretraining
/// distribution).
fn bands_task(rows: usize, rng: &mut Rng) -> Dataset {
    let d = rng.gen_range(4..=6);
    let k = rng.gen_range(2..=3);
    let w: Vec<f64> = (0..d).map(|_| standard(rng) / (d as f64).sqrt()).collect();
    let mut x = Vec::with_capacity(rows);
    let mut scores = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row: Vec<f64> = (0..d).map(|_| 1.5 * standard(rng)).collect();
        let s: f64 = row.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        scores.push((2.0 * s).tanh() + 0.05 * standard(rng));
        x.push(row);
    }
    let thresholds = quantile_thresholds(&scores, k);
    let mut labels: Vec<usize> = scores.iter().map(|&s| digitize(s, &thresholds)).collect();
    flip_labels(&mut labels, k, 0.04, rng);
    numeric_dataset(x, labels)
}

fn numeric_dataset(x: Vec<Vec<f64>>, labels: Vec<usize>) -> Dataset {
    let d = x[0].len();
    let mut schema: Vec<ColumnSchema> = (0..d).map(|j| ColumnSchema::numeric(&format!("f{j}"))).collect();
    schema.push(ColumnSchema::categorical("target").target());
    let rows = x
        .iter()
        .zip(labels.iter())
        .map(|(r, &l)| {
            let mut cells: Vec<Cell> = r.iter().map(|&v| Cell::Num(v)).collect();
            cells.push(Cell::Text(l.to_string()));
            cells
        })
        .collect();
    Dataset::new(schema, rows, TaskKind::Classification).expect("valid schema")
}

/// Deterministic suite of classification tasks with sizes spread evenly over
/// [min_rows, max_rows].
pub fn classification_suite(cfg: &SuiteConfig) -> Vec<BenchDataset> {
    (0..cfg.n_tasks)
        .map(|t| {
            let rows = if cfg.n_tasks == 1 {
                cfg.min_rows
            } else {
                cfg.min_rows + (cfg.max_rows - cfg.min_rows) * t / (cfg.n_tasks - 1)
            };
            let mut rng = rng_from_seed(derive_seed(cfg.seed, &[31, t as u64]));
            let data = match t % 4 {
                0 => centroid_task(rows, &mut rng),
                1 => xor_task(rows, &mut rng),
                2 => rings_task(rows, &mut rng),
                _ => bands_task(rows, &mut rng),
            };
            let kind = ["centroids", "xor", "rings", "bands"][t % 4];
            BenchDataset { id: format!("cls-{t:02}-{kind}-{rows}"), data }
        })
        .collect()
}

/// Noiseless (or mildly noisy) linear regression task: y = w . x + b.
pub fn linear_regression_task(rows: usize, n_features: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let w: Vec<f64> = (0..n_features).map(|_| standard(&mut rng)).collect();
    let b = standard(&mut rng);
    let mut schema: Vec<ColumnSchema> =
        (0..n_features).map(|j| ColumnSchema::numeric(&format!("f{j}"))).collect();
    schema.push(ColumnSchema::numeric("target").target());
    let rows_cells = (0..rows)
        .map(|_| {
            let x: Vec<f64> = (0..n_features).map(|_| standard(&mut rng)).collect();
            let y: f64 =
                x.iter().zip(w.iter()).map(|(a, c)| a * c).sum::<f64>() + b + noise * standard(&mut rng);
            let mut cells: Vec<Cell> = x.iter().map(|&v| Cell::Num(v)).collect();
            cells.push(Cell::Num(y));
            cells
        })
        .collect();
    Dataset::new(schema, rows_cells, TaskKind::Regression).expect("valid schema")
}

/// Small regression suite (linear and smooth-nonlinear targets).
pub fn regression_suite(n_tasks: usize, min_rows: usize, max_rows: usize, seed: u64) -> Vec<BenchDataset> {
    (0..n_tasks)
        .map(|t| {
            let rows = if n_tasks == 1 {
                min_rows
            } else {
                min_rows + (max_rows - min_rows) * t / (n_tasks - 1)
            };
            let task_seed = derive_seed(seed, &[47, t as u64]);
            let data = if t % 2 == 0 {
                linear_regression_task(rows, 4, 0.05, task_seed)
            } else {
                smooth_regression_task(rows, task_seed)
            };
            BenchDataset { id: format!("reg-{t:02}-{}-{rows}", if t % 2 == 0 { "linear" } else { "smooth" }), data }
        })
        .collect()
}

fn smooth_regression_task(rows: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let d = 4;
    let w: Vec<f64> = (0..d).map(|_| standard(&mut rng)).collect();
    let mut schema: Vec<ColumnSchema> = (0..d).map(|j| ColumnSchema::numeric(&format!("f{j}"))).collect();
    schema.push(ColumnSchema::numeric("target").target());
    let rows_cells = (0..rows)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| standard(&mut rng)).collect();
            let lin: f64 = x.iter().zip(w.iter()).map(|(a, c)| a * c).sum();
            let y = lin.tanh() + 0.3 * (2.0 * x[0]).sin() + 0.05 * standard(&mut rng);
            let mut cells: Vec<Cell> = x.iter().map(|&v| Cell::Num(v)).collect();
            cells.push(Cell::Num(y));
            cells
        })
        .collect();
    Dataset::new(schema, rows_cells, TaskKind::Regression).expect("valid schema")
}

/// Shuffle the support rows of a dataset (round-trip check helper).
pub fn shuffled_copy(ds: &Dataset, seed: u64) -> Dataset {
    let mut idx: Vec<usize> = (0..ds.n_rows()).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    ds.select_rows(&idx)
}
