//! Dataset ingestion: CSV loading, validation, and deterministic splitting.
//!
//! A [`Dataset`] keeps raw cells losslessly: numeric cells are parsed,
//! categorical cells stay as text, and absent cells (empty or the literal
//! `NA`) are recorded as [`Cell::Missing`]. Imputation is owned by the
//! preprocessing stage, never by ingestion.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::rng_from_seed;

/// Feature budget used when a loader is not told otherwise.
pub const DEFAULT_MAX_FEATURES: usize = 100;
/// Hard ceiling on distinct classification labels.
pub const MAX_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Classification => write!(f, "classification"),
            TaskKind::Regression => write!(f, "regression"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub is_target: bool,
}

impl ColumnSchema {
    pub fn numeric(name: &str) -> Self {
        Self { name: name.to_string(), kind: ColumnKind::Numeric, is_target: false }
    }

    pub fn categorical(name: &str) -> Self {
        Self { name: name.to_string(), kind: ColumnKind::Categorical, is_target: false }
    }

    pub fn target(mut self) -> Self {
        self.is_target = true;
        self
    }
}

/// One raw table cell. `Missing` marks cells that were empty or `NA` in the
/// source file; it is the single source of truth for the missing mask.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    /// Canonical text form used as a vocabulary key (numbers use the shortest
    /// round-trip representation). `None` for missing cells.
    pub fn key(&self) -> Option<String> {
        match self {
            Cell::Num(v) => Some(format!("{v}")),
            Cell::Text(s) => Some(s.clone()),
            Cell::Missing => None,
        }
    }

    fn to_field(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v}"),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("schema mismatch at {location}: {detail}")]
    SchemaMismatch { location: String, detail: String },
    #[error("parse error at row {row}, column {col} ({name}): {detail}")]
    ParseError { row: usize, col: usize, name: String, detail: String },
    #[error("classification target has {found} distinct values (maximum {max})")]
    TooManyClasses { found: usize, max: usize },
    #[error("dataset has {found} features (maximum {max})")]
    TooManyFeatures { found: usize, max: usize },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// In-memory table with its schema and task kind. Rows include the target
/// column; `n_features` excludes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Vec<ColumnSchema>,
    pub rows: Vec<Vec<Cell>>,
    pub task: TaskKind,
}

impl Dataset {
    pub fn new(schema: Vec<ColumnSchema>, rows: Vec<Vec<Cell>>, task: TaskKind) -> Result<Self, DataError> {
        validate_schema(&schema)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(DataError::SchemaMismatch {
                    location: format!("row {i}"),
                    detail: format!("expected {} cells, found {}", schema.len(), row.len()),
                });
            }
        }
        Ok(Self { schema, rows, task })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len() - 1
    }

    pub fn target_index(&self) -> usize {
        self.schema.iter().position(|c| c.is_target).expect("schema has a target column")
    }

    /// Column indices of the features, in schema order.
    pub fn feature_indices(&self) -> Vec<usize> {
        let t = self.target_index();
        (0..self.schema.len()).filter(|&i| i != t).collect()
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.rows[row][col].is_missing()
    }

    /// Per-cell missing mask, row-major, aligned with `rows`.
    pub fn missing_mask(&self) -> Vec<Vec<bool>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(Cell::is_missing).collect())
            .collect()
    }

    pub fn target_cells(&self) -> Vec<&Cell> {
        let t = self.target_index();
        self.rows.iter().map(|r| &r[t]).collect()
    }

    /// Distinct non-missing target values, in first-appearance order.
    pub fn distinct_target_keys(&self) -> Vec<String> {
        let t = self.target_index();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for row in &self.rows {
            if let Some(k) = row[t].key() {
                if seen.insert(k.clone()) {
                    out.push(k);
                }
            }
        }
        out
    }

    /// New dataset with the given row indices (schema and task shared).
    pub fn select_rows(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            task: self.task,
        }
    }

    /// Check the feature budget against a model's limit.
    pub fn check_feature_budget(&self, max_features: usize) -> Result<(), DataError> {
        if self.n_features() > max_features {
            return Err(DataError::TooManyFeatures { found: self.n_features(), max: max_features });
        }
        Ok(())
    }
}

fn validate_schema(schema: &[ColumnSchema]) -> Result<(), DataError> {
    let n_targets = schema.iter().filter(|c| c.is_target).count();
    if n_targets != 1 {
        return Err(DataError::InvalidSchema(format!(
            "expected exactly one target column, found {n_targets}"
        )));
    }
    if schema.len() < 2 {
        return Err(DataError::InvalidSchema("need at least one feature column".into()));
    }
    let mut names = HashSet::new();
    for c in schema {
        if !names.insert(c.name.as_str()) {
            return Err(DataError::InvalidSchema(format!("duplicate column name '{}'", c.name)));
        }
    }
    Ok(())
}

fn parse_cell(raw: &str, kind: ColumnKind, row: usize, col: usize, name: &str) -> Result<Cell, DataError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() || trimmed == "NA" {
        return Ok(Cell::Missing);
    }
    match kind {
        ColumnKind::Numeric => {
            let v: f64 = trimmed.parse().map_err(|_| DataError::ParseError {
                row,
                col,
                name: name.to_string(),
                detail: format!("'{trimmed}' is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(DataError::ParseError {
                    row,
                    col,
                    name: name.to_string(),
                    detail: format!("non-finite value '{trimmed}'"),
                });
            }
            Ok(Cell::Num(v))
        }
        ColumnKind::Categorical => Ok(Cell::Text(trimmed.to_string())),
    }
}

/// Load a CSV file against an explicit schema. The header row must match the
/// schema names in order; every data row must have the schema's arity.
pub fn load_dataset_csv(path: &Path, schema: &[ColumnSchema], task: TaskKind) -> Result<Dataset, DataError> {
    load_dataset_csv_with_budget(path, schema, task, DEFAULT_MAX_FEATURES)
}

pub fn load_dataset_csv_with_budget(
    path: &Path,
    schema: &[ColumnSchema],
    task: TaskKind,
    max_features: usize,
) -> Result<Dataset, DataError> {
    validate_schema(schema)?;
    if !path.exists() {
        return Err(DataError::FileNotFound(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;

    let header = reader.headers()?.clone();
    if header.len() != schema.len() {
        return Err(DataError::SchemaMismatch {
            location: "header".into(),
            detail: format!("expected {} columns, found {}", schema.len(), header.len()),
        });
    }
    for (i, (h, c)) in header.iter().zip(schema.iter()).enumerate() {
        if h != c.name {
            return Err(DataError::SchemaMismatch {
                location: format!("header column {i}"),
                detail: format!("expected '{}', found '{}'", c.name, h),
            });
        }
    }

    let mut rows = Vec::new();
    for (ri, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != schema.len() {
            return Err(DataError::SchemaMismatch {
                location: format!("row {ri}"),
                detail: format!("expected {} cells, found {}", schema.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(schema.len());
        for (ci, (raw, col)) in record.iter().zip(schema.iter()).enumerate() {
            let kind = if col.is_target && task == TaskKind::Classification {
                // Classification targets are kept raw; numbers and text both
                // act as labels.
                ColumnKind::Categorical
            } else if col.is_target {
                ColumnKind::Numeric
            } else {
                col.kind
            };
            row.push(parse_cell(raw, kind, ri, ci, &col.name)?);
        }
        rows.push(row);
    }

    let ds = Dataset::new(schema.to_vec(), rows, task)?;
    ds.check_feature_budget(max_features)?;
    if task == TaskKind::Classification {
        let distinct = ds.distinct_target_keys().len();
        if distinct > MAX_CLASSES {
            return Err(DataError::TooManyClasses { found: distinct, max: MAX_CLASSES });
        }
    }
    Ok(ds)
}

/// Write a dataset back to CSV. Missing cells become empty fields, so a
/// load/save/load cycle is lossless at the `Dataset` level.
pub fn save_dataset_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(ds.schema.iter().map(|c| c.name.as_str()))?;
    for row in &ds.rows {
        writer.write_record(row.iter().map(Cell::to_field))?;
    }
    writer.flush()?;
    Ok(())
}

/// Deterministic train/test partition parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        Self { train_fraction, seed }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: 0 }
    }
}

/// Split row indices deterministically; both sides are returned in ascending
/// row order so the partition is a pure function of (n_rows, spec).
pub fn split_indices(n_rows: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if n_rows < 2 {
        return Err(DataError::DegenerateSplit(format!("need at least 2 rows, have {n_rows}")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DataError::DegenerateSplit(format!(
            "train_fraction must lie in (0,1), got {}",
            spec.train_fraction
        )));
    }
    let n_train = (spec.train_fraction * n_rows as f64).round() as usize;
    if n_train == 0 || n_train == n_rows {
        return Err(DataError::DegenerateSplit(format!(
            "fraction {} of {n_rows} rows leaves one side empty",
            spec.train_fraction
        )));
    }
    let mut indices: Vec<usize> = (0..n_rows).collect();
    let mut rng = rng_from_seed(spec.seed);
    indices.shuffle(&mut rng);
    let mut train: Vec<usize> = indices[..n_train].to_vec();
    let mut test: Vec<usize> = indices[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Deterministic disjoint partition of a dataset into train and test parts.
pub fn train_test_split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), DataError> {
    let (train_idx, test_idx) = split_indices(d.n_rows(), spec)?;
    Ok((d.select_rows(&train_idx), d.select_rows(&test_idx)))
}
