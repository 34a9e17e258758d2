//! Feature and target transformations: per-variable quantile maps, label
//! encoding, per-row feature scaling and padding.
//!
//! Fitting only ever sees training rows. A fitted [`PreprocessState`] is
//! immutable; applying it to new rows clamps out-of-range values and treats
//! unseen categories as missing, so application is total.

use std::collections::HashMap;

use ndarray::Array2;
use thiserror::Error;

use crate::dataio::{Cell, ColumnKind, Dataset, TaskKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Uniform,
    Gaussian,
}

impl Default for OutputKind {
    fn default() -> Self {
        OutputKind::Uniform
    }
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("column '{0}' has no non-missing values")]
    EmptyColumn(String),
    #[error("all features missing in row {0}")]
    AllFeaturesMissing(usize),
    #[error("label '{0}' was not present when the mapping was fitted")]
    UnseenLabel(String),
    #[error("target value missing in row {0}")]
    MissingTarget(usize),
    #[error("row has {found} features, expected {expected}")]
    WidthMismatch { found: usize, expected: usize },
    #[error("dataset has {found} features, exceeding max_features {max}")]
    TooWide { found: usize, max: usize },
}

/// Monotone map from raw values to quantile ranks, optionally pushed through
/// the standard normal inverse CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap<F: Scalar> {
    /// Sorted (input value, rank) pairs; ranks are mean ranks after
    /// collapsing duplicate inputs, so they are strictly increasing in value.
    knots: Vec<(F, F)>,
    output: OutputKind,
}

impl<F: Scalar> QuantileMap<F> {
    /// Fit on the non-missing values of one column. Knots are the empirical
    /// quantiles at `n_quantiles` evenly spaced ranks in [0,1]; duplicate
    /// values collapse to their mean rank.
    pub fn fit(values: &[F], n_quantiles: usize, output: OutputKind) -> Result<Self, PreprocessError> {
        if values.is_empty() {
            return Err(PreprocessError::EmptyColumn("<anonymous>".into()));
        }
        let mut sorted: Vec<F> = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let nq = n_quantiles.max(1);

        // (value at rank, rank) for evenly spaced ranks including both ends.
        let mut raw: Vec<(F, F)> = Vec::with_capacity(nq);
        for i in 0..nq {
            let rank = if nq == 1 { 0.5 } else { i as f64 / (nq - 1) as f64 };
            raw.push((empirical_quantile(&sorted, rank), F::cast(rank)));
        }

        // Collapse duplicates to the mean of their ranks.
        let mut knots: Vec<(F, F)> = Vec::new();
        let mut i = 0;
        while i < raw.len() {
            let v = raw[i].0;
            let mut sum = F::zero();
            let mut count = 0usize;
            while i < raw.len() && raw[i].0 == v {
                sum += raw[i].1;
                count += 1;
                i += 1;
            }
            knots.push((v, sum / F::from_count(count)));
        }
        Ok(Self { knots, output })
    }

    pub fn n_knots(&self) -> usize {
        self.knots.len()
    }

    pub fn output_kind(&self) -> OutputKind {
        self.output
    }

    /// Rank of `x` in [0,1]: linear interpolation between bracketing knots,
    /// clamped to 0 below the smallest knot and 1 above the largest. A
    /// single-knot (constant-column) map sends everything to 0.5.
    pub fn rank(&self, x: F) -> F {
        if self.knots.len() == 1 {
            return F::cast(0.5);
        }
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if x <= first.0 {
            return if x < first.0 { F::zero() } else { first.1 };
        }
        if x >= last.0 {
            return if x > last.0 { F::one() } else { last.1 };
        }
        // knots[lo].0 < x <= knots[lo+1].0 after the boundary checks above
        let idx = self.knots.partition_point(|&(v, _)| v < x);
        let (v1, r1) = self.knots[idx - 1];
        let (v2, r2) = self.knots[idx];
        if x == v2 {
            return r2;
        }
        let t = (x - v1) / (v2 - v1);
        r1 + t * (r2 - r1)
    }

    /// Total transform: rank, then the configured output distribution.
    pub fn apply(&self, x: F) -> F {
        let r = self.rank(x);
        match self.output {
            OutputKind::Uniform => r,
            OutputKind::Gaussian => {
                let clipped = r.into_f64().clamp(1e-6, 1.0 - 1e-6);
                F::cast(inverse_normal_cdf(clipped))
            }
        }
    }

    /// Inverse transform: map a transformed value back to the fitted value
    /// scale (clamping to the knot range). Used to decode regression outputs.
    pub fn invert(&self, y: F) -> F {
        let r = match self.output {
            OutputKind::Uniform => y,
            OutputKind::Gaussian => F::cast(standard_normal_cdf(y.into_f64())),
        };
        if self.knots.len() == 1 {
            return self.knots[0].0;
        }
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if r <= first.1 {
            return first.0;
        }
        if r >= last.1 {
            return last.0;
        }
        let idx = self.knots.partition_point(|&(_, kr)| kr < r);
        let (v1, r1) = self.knots[idx - 1];
        let (v2, r2) = self.knots[idx];
        if r == r2 {
            return v2;
        }
        let t = (r - r1) / (r2 - r1);
        v1 + t * (v2 - v1)
    }
}

/// Linear-interpolation empirical quantile of a sorted sample.
fn empirical_quantile<F: Scalar>(sorted: &[F], rank: f64) -> F {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = rank * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let t = F::cast(pos - lo as f64);
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Acklam's rational approximation of the standard normal inverse CDF
/// (absolute error below 1.2e-9 on (0,1)).
pub(crate) fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal CDF via the complementary error function (Abramowitz &
/// Stegun 7.1.26 style approximation through tanh-free erf).
pub(crate) fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    // Numerical Recipes' erfc approximation, |error| < 1.2e-7.
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// First-appearance vocabulary for categorical columns and class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocab {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from cells in first-appearance order, skipping missing ones.
    pub fn fit(cells: &[&Cell]) -> Self {
        let mut v = Vocab::default();
        for cell in cells {
            if let Some(k) = cell.key() {
                v.insert(k);
            }
        }
        v
    }

    fn insert(&mut self, key: String) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.keys.len();
        self.index.insert(key.clone(), i);
        self.keys.push(key);
        i
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn code(&self, cell: &Cell) -> Option<usize> {
        cell.key().and_then(|k| self.index.get(&k).copied())
    }

    pub fn key_of(&self, code: usize) -> &str {
        &self.keys[code]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }
}

/// Encode a categorical column as integer codes in first-appearance order.
/// Missing cells stay `None`; at apply time, unseen categories also map to
/// `None` and are treated as missing downstream.
pub fn encode_categoricals(cells: &[&Cell]) -> (Vec<Option<usize>>, Vocab) {
    let vocab = Vocab::fit(cells);
    let codes = cells.iter().map(|c| vocab.code(c)).collect();
    (codes, vocab)
}

/// Encoded targets of an episode or dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<F: Scalar> {
    Classes(Vec<usize>),
    Reals(Vec<F>),
}

impl<F: Scalar> Targets<F> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Reals(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The numeric value fed into the label embedding: the raw class index
    /// for classification, the transformed real for regression.
    pub fn embed_value(&self, i: usize) -> F {
        match self {
            Targets::Classes(v) => F::from_count(v[i]),
            Targets::Reals(v) => v[i],
        }
    }

    pub fn select(&self, indices: &[usize]) -> Targets<F> {
        match self {
            Targets::Classes(v) => Targets::Classes(indices.iter().map(|&i| v[i]).collect()),
            Targets::Reals(v) => Targets::Reals(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Feature rows after quantile transform, missing imputation, scaling and
/// padding to the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedMatrix<F: Scalar> {
    /// n_rows x max_features; columns beyond the dataset width are zero.
    pub values: Array2<F>,
    /// Per-row count of non-missing features (the scaling denominator).
    pub effective_counts: Vec<usize>,
}

impl<F: Scalar> ProcessedMatrix<F> {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> ProcessedMatrix<F> {
        ProcessedMatrix {
            values: self.values.select(ndarray::Axis(0), indices),
            effective_counts: indices.iter().map(|&i| self.effective_counts[i]).collect(),
        }
    }
}

/// Impute missing entries with zero, zero-pad to `max_features`, and scale
/// every surviving entry by d_f / d_f^i (the per-row effective-count
/// correction). Returns the padded row and the effective count.
pub fn scale_and_pad<F: Scalar>(
    row: &[F],
    missing: &[bool],
    max_features: usize,
    row_index: usize,
) -> Result<(Vec<F>, usize), PreprocessError> {
    let d_f = row.len();
    if missing.len() != d_f {
        return Err(PreprocessError::WidthMismatch { found: missing.len(), expected: d_f });
    }
    if d_f > max_features {
        return Err(PreprocessError::TooWide { found: d_f, max: max_features });
    }
    let effective = missing.iter().filter(|&&m| !m).count();
    if effective == 0 {
        return Err(PreprocessError::AllFeaturesMissing(row_index));
    }
    let scale = F::from_count(d_f) / F::from_count(effective);
    let mut out = vec![F::zero(); max_features];
    for (j, (&v, &m)) in row.iter().zip(missing.iter()).enumerate() {
        if !m {
            out[j] = v * scale;
        }
    }
    Ok((out, effective))
}

/// How a target column is transformed.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetTransform<F: Scalar> {
    Classes(Vocab),
    Real(QuantileMap<F>),
}

#[derive(Debug, Clone, PartialEq)]
struct FeatureTransform<F: Scalar> {
    name: String,
    vocab: Option<Vocab>,
    map: QuantileMap<F>,
}

/// Options controlling how a [`PreprocessState`] is fitted.
#[derive(Debug, Clone, Copy)]
pub struct PreprocessOptions {
    /// Quantile resolution; `None` means min(1000, n_train_rows).
    pub n_quantiles: Option<usize>,
    pub output: OutputKind,
    pub max_features: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { n_quantiles: None, output: OutputKind::Uniform, max_features: crate::dataio::DEFAULT_MAX_FEATURES }
    }
}

impl PreprocessOptions {
    pub fn with_max_features(max_features: usize) -> Self {
        Self { max_features, ..Self::default() }
    }
}

/// Fitted transforms for one dataset: per-feature quantile maps (with
/// categorical vocabularies where needed) and the target encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessState<F: Scalar> {
    features: Vec<FeatureTransform<F>>,
    target: TargetTransform<F>,
    pub max_features: usize,
    pub n_features: usize,
}

impl<F: Scalar> PreprocessState<F> {
    /// Fit on training rows only.
    pub fn fit(train: &Dataset, opts: &PreprocessOptions) -> Result<Self, PreprocessError> {
        let label_vocab = match train.task {
            TaskKind::Classification => Some(Vocab::fit(&train.target_cells())),
            TaskKind::Regression => None,
        };
        Self::fit_impl(train, opts, label_vocab)
    }

    /// Fit feature transforms on `train` but adopt an externally fitted label
    /// vocabulary, so class indices stay aligned across support subsets.
    pub fn fit_with_label_vocab(
        train: &Dataset,
        opts: &PreprocessOptions,
        labels: Vocab,
    ) -> Result<Self, PreprocessError> {
        Self::fit_impl(train, opts, Some(labels))
    }

    fn fit_impl(
        train: &Dataset,
        opts: &PreprocessOptions,
        label_vocab: Option<Vocab>,
    ) -> Result<Self, PreprocessError> {
        let n_features = train.n_features();
        if n_features > opts.max_features {
            return Err(PreprocessError::TooWide { found: n_features, max: opts.max_features });
        }
        let nq = opts.n_quantiles.unwrap_or_else(|| train.n_rows().min(1000)).max(1);

        let mut features = Vec::with_capacity(n_features);
        for &col in &train.feature_indices() {
            let schema = &train.schema[col];
            let cells: Vec<&Cell> = train.rows.iter().map(|r| &r[col]).collect();
            let (numeric, vocab): (Vec<F>, Option<Vocab>) = match schema.kind {
                ColumnKind::Categorical => {
                    let (codes, vocab) = encode_categoricals(&cells);
                    let vals = codes
                        .iter()
                        .filter_map(|c| c.map(F::from_count))
                        .collect();
                    (vals, Some(vocab))
                }
                ColumnKind::Numeric => {
                    let vals = cells
                        .iter()
                        .filter_map(|c| match c {
                            Cell::Num(v) => Some(F::cast(*v)),
                            _ => None,
                        })
                        .collect();
                    (vals, None)
                }
            };
            if numeric.is_empty() {
                return Err(PreprocessError::EmptyColumn(schema.name.clone()));
            }
            let map = QuantileMap::fit(&numeric, nq.min(numeric.len()), opts.output)?;
            features.push(FeatureTransform { name: schema.name.clone(), vocab, map });
        }

        let target = match train.task {
            TaskKind::Classification => {
                TargetTransform::Classes(label_vocab.expect("classification label vocabulary"))
            }
            TaskKind::Regression => {
                let t = train.target_index();
                let mut vals = Vec::with_capacity(train.n_rows());
                for (i, row) in train.rows.iter().enumerate() {
                    match &row[t] {
                        Cell::Num(v) => vals.push(F::cast(*v)),
                        Cell::Missing => return Err(PreprocessError::MissingTarget(i)),
                        Cell::Text(s) => {
                            return Err(PreprocessError::UnseenLabel(format!(
                                "non-numeric regression target '{s}'"
                            )))
                        }
                    }
                }
                TargetTransform::Real(QuantileMap::fit(&vals, nq.min(vals.len()), OutputKind::Uniform)?)
            }
        };

        Ok(Self { features, target, max_features: opts.max_features, n_features })
    }

    /// Number of classes in the fitted label space (classification only).
    pub fn n_classes(&self) -> Option<usize> {
        match &self.target {
            TargetTransform::Classes(v) => Some(v.len()),
            TargetTransform::Real(_) => None,
        }
    }

    pub fn label_vocab(&self) -> Option<&Vocab> {
        match &self.target {
            TargetTransform::Classes(v) => Some(v),
            TargetTransform::Real(_) => None,
        }
    }

    pub fn target_map(&self) -> Option<&QuantileMap<F>> {
        match &self.target {
            TargetTransform::Real(m) => Some(m),
            TargetTransform::Classes(_) => None,
        }
    }

    /// Transform, impute, scale and pad every feature row of `ds`.
    pub fn transform_features(&self, ds: &Dataset) -> Result<ProcessedMatrix<F>, PreprocessError> {
        if ds.n_features() != self.n_features {
            return Err(PreprocessError::WidthMismatch { found: ds.n_features(), expected: self.n_features });
        }
        let feature_cols = ds.feature_indices();
        let n = ds.n_rows();
        let mut values = Array2::zeros((n, self.max_features));
        let mut effective_counts = Vec::with_capacity(n);

        let mut transformed = vec![F::zero(); self.n_features];
        let mut missing = vec![false; self.n_features];
        for (i, row) in ds.rows.iter().enumerate() {
            for (j, (&col, ft)) in feature_cols.iter().zip(self.features.iter()).enumerate() {
                let cell = &row[col];
                let raw: Option<F> = match (&ft.vocab, cell) {
                    (_, Cell::Missing) => None,
                    // Unseen categories become missing rather than erroring.
                    (Some(vocab), cell) => vocab.code(cell).map(F::from_count),
                    (None, Cell::Num(v)) => Some(F::cast(*v)),
                    (None, Cell::Text(_)) => None,
                };
                match raw {
                    Some(v) => {
                        transformed[j] = ft.map.apply(v);
                        missing[j] = false;
                    }
                    None => {
                        transformed[j] = F::zero();
                        missing[j] = true;
                    }
                }
            }
            let (padded, eff) = scale_and_pad(&transformed, &missing, self.max_features, i)?;
            for (j, v) in padded.into_iter().enumerate() {
                values[(i, j)] = v;
            }
            effective_counts.push(eff);
        }
        Ok(ProcessedMatrix { values, effective_counts })
    }

    /// Encode the target column of `ds` with the fitted mapping.
    pub fn transform_targets(&self, ds: &Dataset) -> Result<Targets<F>, PreprocessError> {
        let t = ds.target_index();
        match &self.target {
            TargetTransform::Classes(vocab) => {
                let mut out = Vec::with_capacity(ds.n_rows());
                for (i, row) in ds.rows.iter().enumerate() {
                    let cell = &row[t];
                    if cell.is_missing() {
                        return Err(PreprocessError::MissingTarget(i));
                    }
                    match vocab.code(cell) {
                        Some(c) => out.push(c),
                        None => {
                            return Err(PreprocessError::UnseenLabel(
                                cell.key().unwrap_or_default(),
                            ))
                        }
                    }
                }
                Ok(Targets::Classes(out))
            }
            TargetTransform::Real(map) => {
                let mut out = Vec::with_capacity(ds.n_rows());
                for (i, row) in ds.rows.iter().enumerate() {
                    match &row[t] {
                        Cell::Num(v) => out.push(map.apply(F::cast(*v))),
                        _ => return Err(PreprocessError::MissingTarget(i)),
                    }
                }
                Ok(Targets::Reals(out))
            }
        }
    }

    /// Decode regression outputs back to the original target scale.
    pub fn decode_regression(&self, preds: &[F]) -> Option<Vec<F>> {
        self.target_map().map(|m| preds.iter().map(|&p| m.invert(p)).collect())
    }

    /// Decode a class index back to its label text.
    pub fn decode_label(&self, class: usize) -> Option<&str> {
        self.label_vocab().map(|v| v.key_of(class))
    }
}

/// Encode raw targets for a task: dense first-appearance class indices for
/// classification, quantile-transformed reals for regression.
pub fn encode_labels<F: Scalar>(
    cells: &[&Cell],
    task: TaskKind,
) -> Result<(Targets<F>, TargetTransform<F>), PreprocessError> {
    match task {
        TaskKind::Classification => {
            let vocab = Vocab::fit(cells);
            let mut out = Vec::with_capacity(cells.len());
            for (i, cell) in cells.iter().enumerate() {
                if cell.is_missing() {
                    return Err(PreprocessError::MissingTarget(i));
                }
                out.push(vocab.code(cell).expect("fitted on these cells"));
            }
            Ok((Targets::Classes(out), TargetTransform::Classes(vocab)))
        }
        TaskKind::Regression => {
            let mut vals = Vec::with_capacity(cells.len());
            for (i, cell) in cells.iter().enumerate() {
                match cell {
                    Cell::Num(v) => vals.push(F::cast(*v)),
                    _ => return Err(PreprocessError::MissingTarget(i)),
                }
            }
            let map = QuantileMap::fit(&vals, vals.len().min(1000), OutputKind::Uniform)?;
            let out = vals.iter().map(|&v| map.apply(v)).collect();
            Ok((Targets::Reals(out), TargetTransform::Real(map)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ColumnSchema;
    use approx::assert_abs_diff_eq;

    #[test]
    fn five_point_map_hits_even_ranks() {
        let m = QuantileMap::<f64>::fit(&[1.0, 2.0, 3.0, 4.0, 5.0], 5, OutputKind::Uniform).unwrap();
        assert_abs_diff_eq!(m.apply(1.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.apply(3.0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.apply(5.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.apply(2.0), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn constant_column_maps_to_half() {
        let m = QuantileMap::<f64>::fit(&[7.0, 7.0, 7.0], 3, OutputKind::Uniform).unwrap();
        assert_eq!(m.n_knots(), 1);
        assert_abs_diff_eq!(m.apply(7.0), 0.5);
        assert_abs_diff_eq!(m.apply(-100.0), 0.5);
        assert_abs_diff_eq!(m.apply(100.0), 0.5);
    }

    #[test]
    fn out_of_range_inputs_clamp() {
        let m = QuantileMap::<f64>::fit(&[1.0, 2.0, 3.0, 4.0, 5.0], 5, OutputKind::Uniform).unwrap();
        assert_eq!(m.apply(-100.0), 0.0);
        assert_eq!(m.apply(100.0), 1.0);
    }

    #[test]
    fn interpolation_between_knots() {
        // knots {1 -> 0, 3 -> 0.5, 5 -> 1}; x = 2.5 interpolates to 0.375
        let m = QuantileMap::<f64>::fit(&[1.0, 3.0, 5.0], 3, OutputKind::Uniform).unwrap();
        assert_abs_diff_eq!(m.apply(2.5), 0.375, epsilon = 1e-12);
    }

    #[test]
    fn normal_sample_maps_close_to_uniform() {
        use rand::Rng as _;
        use rand_distr::StandardNormal;
        let mut rng = crate::rng::rng_from_seed(11);
        let values: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let m = QuantileMap::fit(&values, 1000, OutputKind::Uniform).unwrap();
        let mut transformed: Vec<f64> = values.iter().map(|&v| m.apply(v)).collect();
        transformed.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov-Smirnov style sup-norm distance to the uniform CDF.
        let n = transformed.len() as f64;
        let mut sup = 0.0f64;
        for (i, t) in transformed.iter().enumerate() {
            sup = sup.max((t - (i + 1) as f64 / n).abs());
            sup = sup.max((t - i as f64 / n).abs());
        }
        assert!(sup < 0.02, "sup-norm distance {sup} >= 0.02");
    }

    #[test]
    fn gaussian_output_is_finite_and_centered() {
        let m = QuantileMap::<f64>::fit(&[1.0, 2.0, 3.0, 4.0, 5.0], 5, OutputKind::Gaussian).unwrap();
        assert!(m.apply(-1e9).is_finite());
        assert!(m.apply(1e9).is_finite());
        assert_abs_diff_eq!(m.apply(3.0), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn inverse_normal_cdf_reference_points() {
        assert_abs_diff_eq!(inverse_normal_cdf(0.5), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(inverse_normal_cdf(0.975), 1.959964, epsilon = 1e-5);
        assert_abs_diff_eq!(inverse_normal_cdf(0.025), -1.959964, epsilon = 1e-5);
        // Round trip through the CDF approximation.
        for &p in &[0.001, 0.1, 0.3, 0.7, 0.9, 0.999] {
            assert_abs_diff_eq!(standard_normal_cdf(inverse_normal_cdf(p)), p, epsilon = 1e-6);
        }
    }

    #[test]
    fn quantile_map_inverts_to_value_scale() {
        let m = QuantileMap::<f64>::fit(&[10.0, 20.0, 30.0], 3, OutputKind::Uniform).unwrap();
        assert_abs_diff_eq!(m.invert(0.0), 10.0);
        assert_abs_diff_eq!(m.invert(0.5), 20.0);
        assert_abs_diff_eq!(m.invert(1.0), 30.0);
        assert_abs_diff_eq!(m.invert(0.25), 15.0);
        // Out-of-range ranks clamp to the fitted value range.
        assert_abs_diff_eq!(m.invert(-0.5), 10.0);
        assert_abs_diff_eq!(m.invert(1.5), 30.0);
    }

    #[test]
    fn empty_column_errors() {
        assert!(matches!(
            QuantileMap::<f64>::fit(&[], 5, OutputKind::Uniform),
            Err(PreprocessError::EmptyColumn(_))
        ));
    }

    #[test]
    fn scale_and_pad_identity_when_nothing_missing() {
        let (row, eff) = scale_and_pad(&[1.0, 2.0, 3.0, 4.0], &[false; 4], 100, 0).unwrap();
        assert_eq!(eff, 4);
        assert_eq!(&row[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(row[4..].iter().all(|&v| v == 0.0));
        assert_eq!(row.len(), 100);
    }

    #[test]
    fn scale_and_pad_doubles_survivors_when_half_missing() {
        let (row, eff) =
            scale_and_pad(&[1.0, 0.0, 3.0, 0.0], &[false, true, false, true], 100, 0).unwrap();
        assert_eq!(eff, 2);
        assert_eq!(row[0], 2.0);
        assert_eq!(row[1], 0.0);
        assert_eq!(row[2], 6.0);
        assert_eq!(row[3], 0.0);
    }

    #[test]
    fn scale_and_pad_full_width_row_is_identity() {
        let row: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let missing = vec![false; 100];
        let (out, eff) = scale_and_pad(&row, &missing, 100, 0).unwrap();
        assert_eq!(eff, 100);
        assert_eq!(out, row);
    }

    #[test]
    fn all_missing_row_errors() {
        assert!(matches!(
            scale_and_pad::<f64>(&[0.0, 0.0], &[true, true], 10, 3),
            Err(PreprocessError::AllFeaturesMissing(3))
        ));
    }

    #[test]
    fn labels_encode_in_first_appearance_order() {
        let cells = [Cell::Text("cat".into()), Cell::Text("dog".into()), Cell::Text("cat".into())];
        let refs: Vec<&Cell> = cells.iter().collect();
        let (targets, tf) = encode_labels::<f64>(&refs, TaskKind::Classification).unwrap();
        assert_eq!(targets, Targets::Classes(vec![0, 1, 0]));
        match tf {
            TargetTransform::Classes(v) => assert_eq!(v.len(), 2),
            _ => panic!("expected class mapping"),
        }
    }

    #[test]
    fn regression_targets_are_quantile_transformed() {
        let cells = [Cell::Num(10.0), Cell::Num(20.0), Cell::Num(30.0)];
        let refs: Vec<&Cell> = cells.iter().collect();
        let (targets, _) = encode_labels::<f64>(&refs, TaskKind::Regression).unwrap();
        match targets {
            Targets::Reals(v) => {
                assert_abs_diff_eq!(v[0], 0.0);
                assert_abs_diff_eq!(v[1], 0.5);
                assert_abs_diff_eq!(v[2], 1.0);
            }
            _ => panic!("expected reals"),
        }
    }

    #[test]
    fn unseen_label_errors_at_apply_time() {
        let cells = [Cell::Text("cat".into()), Cell::Text("dog".into())];
        let refs: Vec<&Cell> = cells.iter().collect();
        let vocab = Vocab::fit(&refs);
        assert_eq!(vocab.code(&Cell::Text("bird".into())), None);

        let train = toy_cls_dataset(&["cat", "dog"]);
        let state = PreprocessState::<f64>::fit(&train, &PreprocessOptions::default()).unwrap();
        let test = toy_cls_dataset(&["bird"]);
        assert!(matches!(
            state.transform_targets(&test),
            Err(PreprocessError::UnseenLabel(l)) if l == "bird"
        ));
    }

    #[test]
    fn categorical_codes_are_ordinal_then_quantiled() {
        let cells = [
            Cell::Text("red".into()),
            Cell::Text("blue".into()),
            Cell::Text("red".into()),
            Cell::Text("green".into()),
        ];
        let refs: Vec<&Cell> = cells.iter().collect();
        let (codes, _) = encode_categoricals(&refs);
        assert_eq!(codes, vec![Some(0), Some(1), Some(0), Some(2)]);
        // The codes then pass through their own quantile map like any number.
        let vals: Vec<f64> = codes.iter().map(|c| c.unwrap() as f64).collect();
        let m = QuantileMap::fit(&vals, 4, OutputKind::Uniform).unwrap();
        assert!(m.apply(0.0) < m.apply(1.0));
        assert!(m.apply(1.0) < m.apply(2.0));
    }

    fn toy_cls_dataset(labels: &[&str]) -> Dataset {
        let schema = vec![ColumnSchema::numeric("x"), ColumnSchema::categorical("y").target()];
        let rows = labels
            .iter()
            .enumerate()
            .map(|(i, l)| vec![Cell::Num(i as f64), Cell::Text(l.to_string())])
            .collect();
        Dataset::new(schema, rows, TaskKind::Classification).unwrap()
    }

    fn toy_mixed_dataset() -> Dataset {
        let schema = vec![
            ColumnSchema::numeric("a"),
            ColumnSchema::categorical("c"),
            ColumnSchema::categorical("y").target(),
        ];
        let rows = vec![
            vec![Cell::Num(1.0), Cell::Text("red".into()), Cell::Text("p".into())],
            vec![Cell::Num(2.0), Cell::Text("blue".into()), Cell::Text("q".into())],
            vec![Cell::Num(3.0), Cell::Text("red".into()), Cell::Text("p".into())],
            vec![Cell::Num(4.0), Cell::Text("green".into()), Cell::Text("q".into())],
        ];
        Dataset::new(schema, rows, TaskKind::Classification).unwrap()
    }

    #[test]
    fn unseen_category_becomes_missing_and_shrinks_effective_count() {
        let train = toy_mixed_dataset();
        let state = PreprocessState::<f64>::fit(&train, &PreprocessOptions::default()).unwrap();

        let test = Dataset::new(
            train.schema.clone(),
            vec![vec![Cell::Num(2.5), Cell::Text("violet".into()), Cell::Text("p".into())]],
            TaskKind::Classification,
        )
        .unwrap();
        let pm = state.transform_features(&test).unwrap();
        // Direct recount: 2 features, 1 usable -> d_f^i = 1.
        assert_eq!(pm.effective_counts[0], 1);
        assert_eq!(pm.values[(0, 1)], 0.0);
        // Surviving feature scaled by d_f / d_f^i = 2.
        let expected = state.features[0].map.apply(2.5) * 2.0;
        assert_abs_diff_eq!(pm.values[(0, 0)], expected, epsilon = 1e-12);
    }

    #[test]
    fn applying_state_never_mutates_it() {
        let train = toy_mixed_dataset();
        let state = PreprocessState::<f64>::fit(&train, &PreprocessOptions::default()).unwrap();
        let snapshot = state.clone();
        let _ = state.transform_features(&train).unwrap();
        let _ = state.transform_targets(&train).unwrap();
        assert_eq!(state, snapshot);
    }

    #[test]
    fn processed_columns_beyond_width_are_zero() {
        let train = toy_mixed_dataset();
        let state = PreprocessState::<f64>::fit(&train, &PreprocessOptions::default()).unwrap();
        let pm = state.transform_features(&train).unwrap();
        assert_eq!(pm.width(), 100);
        for i in 0..pm.n_rows() {
            for j in 2..100 {
                assert_eq!(pm.values[(i, j)], 0.0);
            }
        }
    }
}
