//! Synthetic tabular classification tasks for pretraining.
//!
//! Each task draws inputs from a random Gaussian mixture, pushes them through
//! a randomly weighted two-layer tanh map to a scalar score plus noise, and
//! bins the score at random quantile thresholds into class labels. This is a
//! deliberately simple stand-in for a structural-causal prior: same
//! interface, enough signal that in-context learning has something to learn.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Cell, ColumnSchema, Dataset, TaskKind, MAX_CLASSES};
use crate::model::Episode;
use crate::preprocess::{PreprocessError, PreprocessOptions, PreprocessState};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "default_min_rows")]
    pub min_rows: usize,
    #[serde(default = "default_max_rows")]
    pub max_rows: usize,
    #[serde(default = "default_feature_range")]
    pub feature_count_range: (usize, usize),
    #[serde(default = "default_class_range")]
    pub class_count_range: (usize, usize),
    #[serde(default = "default_latent_range")]
    pub latent_width_range: (usize, usize),
    #[serde(default = "default_component_range")]
    pub n_components_range: (usize, usize),
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_rows() -> usize {
    128
}
fn default_max_rows() -> usize {
    320
}
fn default_feature_range() -> (usize, usize) {
    (2, 6)
}
fn default_class_range() -> (usize, usize) {
    (2, 3)
}
fn default_latent_range() -> (usize, usize) {
    (2, 6)
}
fn default_component_range() -> (usize, usize) {
    (1, 3)
}
fn default_noise() -> f64 {
    0.03
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            min_rows: default_min_rows(),
            max_rows: default_max_rows(),
            feature_count_range: default_feature_range(),
            class_count_range: default_class_range(),
            latent_width_range: default_latent_range(),
            n_components_range: default_component_range(),
            noise_scale: default_noise(),
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("invalid prior config: {0}")]
    InvalidConfig(String),
    #[error("episode sampling stayed degenerate after {0} attempts")]
    Degenerate(usize),
    #[error("preprocess error while building episode: {0}")]
    Preprocess(#[from] PreprocessError),
}

impl PriorConfig {
    pub fn validate(&self, max_features: usize) -> Result<(), PriorError> {
        if self.min_rows < 4 || self.min_rows > self.max_rows {
            return Err(PriorError::InvalidConfig(format!(
                "row range [{}, {}] is invalid",
                self.min_rows, self.max_rows
            )));
        }
        if self.max_rows > 1000 {
            return Err(PriorError::InvalidConfig(format!(
                "max_rows {} exceeds the 1000-sample pretraining ceiling",
                self.max_rows
            )));
        }
        let (flo, fhi) = self.feature_count_range;
        if flo == 0 || flo > fhi || fhi > max_features {
            return Err(PriorError::InvalidConfig(format!(
                "feature range ({flo}, {fhi}) must fit 1..={max_features}"
            )));
        }
        let (klo, khi) = self.class_count_range;
        if klo < 2 || klo > khi || khi > MAX_CLASSES {
            return Err(PriorError::InvalidConfig(format!(
                "class range ({klo}, {khi}) must fit 2..={MAX_CLASSES}"
            )));
        }
        let (llo, lhi) = self.latent_width_range;
        if llo == 0 || llo > lhi {
            return Err(PriorError::InvalidConfig(format!("latent range ({llo}, {lhi}) is invalid")));
        }
        let (clo, chi) = self.n_components_range;
        if clo == 0 || clo > chi {
            return Err(PriorError::InvalidConfig(format!("component range ({clo}, {chi}) is invalid")));
        }
        if self.noise_scale < 0.0 {
            return Err(PriorError::InvalidConfig("noise_scale must be non-negative".into()));
        }
        Ok(())
    }
}

fn draw_range(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Sample one synthetic classification dataset. Deterministic given the rng
/// state.
pub fn sample_prior_dataset(cfg: &PriorConfig, rng: &mut Rng) -> Dataset {
    let d_f = draw_range(rng, cfg.feature_count_range);
    let n_rows = draw_range(rng, (cfg.min_rows, cfg.max_rows));
    let k = draw_range(rng, cfg.class_count_range);
    let n_components = draw_range(rng, cfg.n_components_range);
    let latent = draw_range(rng, cfg.latent_width_range);

    // Gaussian mixture inputs.
    let means: Vec<Vec<f64>> = (0..n_components)
        .map(|_| (0..d_f).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let scales: Vec<Vec<f64>> = (0..n_components)
        .map(|_| (0..d_f).map(|_| rng.gen_range(0.5..1.5)).collect())
        .collect();
    let mut x = vec![vec![0.0f64; d_f]; n_rows];
    for row in x.iter_mut() {
        let c = rng.gen_range(0..n_components);
        for (j, v) in row.iter_mut().enumerate() {
            *v = means[c][j] + scales[c][j] * rng.sample::<f64, _>(StandardNormal);
        }
    }

    // Random two-layer nonlinear map to a scalar score. The hidden
    // activation is drawn per task so boundary families vary (monotone
    // ridges, periodic stripes, folds).
    let w1: Vec<Vec<f64>> = (0..d_f)
        .map(|_| {
            (0..latent)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / (d_f as f64).sqrt())
                .collect()
        })
        .collect();
    let b1: Vec<f64> = (0..latent).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let w2: Vec<f64> = (0..latent)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / (latent as f64).sqrt())
        .collect();
    let act_draw: f64 = rng.gen_range(0.0..1.0);
    let freq: f64 = rng.gen_range(0.8..2.0);
    let activation = move |h: f64| -> f64 {
        if act_draw < 0.5 {
            h.tanh()
        } else if act_draw < 0.75 {
            (freq * h).sin()
        } else {
            h.abs().min(3.0)
        }
    };

    let mut scores = vec![0.0f64; n_rows];
    for (i, row) in x.iter().enumerate() {
        let mut s = 0.0;
        for t in 0..latent {
            let mut h = b1[t];
            for (j, &v) in row.iter().enumerate() {
                h += v * w1[j][t];
            }
            s += activation(h) * w2[t];
        }
        scores[i] = s + cfg.noise_scale * rng.sample::<f64, _>(StandardNormal);
    }

    // Quantile thresholds: random levels blended with even spacing so no
    // class shrinks below half its fair share.
    let mut levels: Vec<f64> = (0..k - 1).map(|_| rng.gen_range(0.0..1.0)).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let thresholds: Vec<f64> = levels
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let level = 0.5 * u + 0.5 * (i + 1) as f64 / k as f64;
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pos = level * (n_rows - 1) as f64;
            let lo = pos.floor() as usize;
            let t = pos - lo as f64;
            if lo + 1 < n_rows {
                sorted[lo] * (1.0 - t) + sorted[lo + 1] * t
            } else {
                sorted[lo]
            }
        })
        .collect();

    let mut schema: Vec<ColumnSchema> = (0..d_f).map(|j| ColumnSchema::numeric(&format!("f{j}"))).collect();
    schema.push(ColumnSchema::categorical("target").target());
    let rows: Vec<Vec<Cell>> = x
        .iter()
        .zip(scores.iter())
        .map(|(row, &s)| {
            let label = thresholds.iter().filter(|&&t| s > t).count();
            let mut cells: Vec<Cell> = row.iter().map(|&v| Cell::Num(v)).collect();
            cells.push(Cell::Text(label.to_string()));
            cells
        })
        .collect();
    Dataset::new(schema, rows, TaskKind::Classification).expect("generated schema is valid")
}

/// A support/query partition attempt for an episode. The episode is
/// degenerate when some task class is absent from the support side.
fn try_episode<F: Scalar>(
    ds: &Dataset,
    width: usize,
    rng: &mut Rng,
) -> Result<Option<Episode<F>>, PriorError> {
    use rand::seq::SliceRandom;
    let n = ds.n_rows();
    let frac: f64 = rng.gen_range(0.1..0.9);
    let n_s = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut sup: Vec<usize> = idx[..n_s].to_vec();
    let mut qry: Vec<usize> = idx[n_s..].to_vec();
    sup.sort_unstable();
    qry.sort_unstable();

    let support = ds.select_rows(&sup);
    let query = ds.select_rows(&qry);
    if support.distinct_target_keys().len() != ds.distinct_target_keys().len() {
        return Ok(None);
    }

    let state = PreprocessState::<F>::fit(&support, &PreprocessOptions::with_max_features(width))?;
    let x_support = state.transform_features(&support)?;
    let y_support = state.transform_targets(&support)?;
    let x_query = state.transform_features(&query)?;
    let y_query = match state.transform_targets(&query) {
        Ok(y) => y,
        // A query label unseen in support is the same degeneracy.
        Err(PreprocessError::UnseenLabel(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let episode = Episode::new(x_support, y_support, x_query, Some(y_query), state.n_classes())
        .expect("episode built from a consistent dataset");
    Ok(Some(episode))
}

const EPISODE_RETRIES: usize = 100;

/// Sample a training-ready episode: a fresh prior dataset, preprocessing
/// fitted on the support part, support fraction uniform on [0.1, 0.9].
/// Degenerate draws are resampled.
pub fn sample_prior_episode<F: Scalar>(
    cfg: &PriorConfig,
    width: usize,
    rng: &mut Rng,
) -> Result<Episode<F>, PriorError> {
    for _ in 0..EPISODE_RETRIES {
        let ds = sample_prior_dataset(cfg, rng);
        if let Some(e) = try_episode(&ds, width, rng)? {
            return Ok(e);
        }
    }
    Err(PriorError::Degenerate(EPISODE_RETRIES))
}
