//! Learnable weights, their canonical tensor naming, and initialization.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use super::config::ModelConfig;
use super::ModelError;
use crate::dataio::TaskKind;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F: Scalar> {
    pub w_q: Array2<F>,
    pub b_q: Array1<F>,
    pub w_k: Array2<F>,
    pub b_k: Array1<F>,
    pub w_v: Array2<F>,
    pub b_v: Array1<F>,
    pub w_o: Array2<F>,
    pub b_o: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams<F: Scalar> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F: Scalar> {
    pub ln1: LayerNormParams<F>,
    pub attn: AttentionParams<F>,
    pub ln2: LayerNormParams<F>,
    pub ff: FeedForwardParams<F>,
}

/// All learnable weights. Weight matrices are stored input-major, i.e.
/// `w_x` has shape `(max_features, hidden_dim)` and a token batch `X`
/// is projected as `X . w_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Scalar> {
    pub w_x: Array2<F>,
    pub w_y: Array1<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln: LayerNormParams<F>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

/// Borrowed view of one named tensor.
pub enum TensorRef<'a, F: Scalar> {
    V(&'a Array1<F>),
    M(&'a Array2<F>),
}

pub enum TensorMut<'a, F: Scalar> {
    V(&'a mut Array1<F>),
    M(&'a mut Array2<F>),
}

impl<'a, F: Scalar> TensorRef<'a, F> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::V(a) => vec![a.len()],
            TensorRef::M(a) => vec![a.nrows(), a.ncols()],
        }
    }

    /// Contiguous element view; params are always standard-layout.
    pub fn as_slice(&self) -> &[F] {
        match self {
            TensorRef::V(a) => a.as_slice().expect("contiguous"),
            TensorRef::M(a) => a.as_slice().expect("contiguous"),
        }
    }
}

impl<'a, F: Scalar> TensorMut<'a, F> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorMut::V(a) => vec![a.len()],
            TensorMut::M(a) => vec![a.nrows(), a.ncols()],
        }
    }

    pub fn as_slice_mut(&mut self) -> &mut [F] {
        match self {
            TensorMut::V(a) => a.as_slice_mut().expect("contiguous"),
            TensorMut::M(a) => a.as_slice_mut().expect("contiguous"),
        }
    }
}

fn head_dim(cfg: &ModelConfig) -> usize {
    match cfg.task {
        TaskKind::Classification => cfg.max_classes,
        TaskKind::Regression => 1,
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Fresh initialization: projections and attention/feed-forward weights
    /// drawn uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero,
    /// layer norms at identity, head zeroed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let dff = cfg.feedforward_dim;
        let mut rng = rng_from_seed(seed);

        // Draws happen in f64 so f32 and f64 runs share the same pattern.
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| -> Array2<F> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| F::cast(rng.gen_range(-bound..=bound)))
        };

        let w_x = uniform(cfg.max_features, d, cfg.max_features);
        let w_y = {
            let col = uniform(d, 1, 1);
            Array1::from_iter(col.iter().copied())
        };

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1: LayerNormParams { gamma: Array1::ones(d), beta: Array1::zeros(d) },
                attn: AttentionParams {
                    w_q: uniform(d, d, d),
                    b_q: Array1::zeros(d),
                    w_k: uniform(d, d, d),
                    b_k: Array1::zeros(d),
                    w_v: uniform(d, d, d),
                    b_v: Array1::zeros(d),
                    w_o: uniform(d, d, d),
                    b_o: Array1::zeros(d),
                },
                ln2: LayerNormParams { gamma: Array1::ones(d), beta: Array1::zeros(d) },
                ff: FeedForwardParams {
                    w1: uniform(d, dff, d),
                    b1: Array1::zeros(dff),
                    w2: uniform(dff, d, dff),
                    b2: Array1::zeros(d),
                },
            });
        }

        Ok(Self {
            w_x,
            w_y,
            layers,
            final_ln: LayerNormParams { gamma: Array1::ones(d), beta: Array1::zeros(d) },
            head_w: Array2::zeros((d, head_dim(cfg))),
            head_b: Array1::zeros(head_dim(cfg)),
        })
    }

    /// Same-shape container filled with zeros (gradient / moment buffer).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for mut t in out.tensors_mut() {
            for v in t.as_slice_mut() {
                *v = F::zero();
            }
        }
        out
    }

    /// Replace the output head for a different task kind, zero-initialized.
    /// Used when fine-tuning a classification checkpoint on regression.
    pub fn with_task_head(mut self, task: TaskKind, max_classes: usize) -> Self {
        let d = self.head_w.nrows();
        let out = match task {
            TaskKind::Classification => max_classes,
            TaskKind::Regression => 1,
        };
        self.head_w = Array2::zeros((d, out));
        self.head_b = Array1::zeros(out);
        self
    }

    /// Named tensors in canonical order. The order fixes the element layout
    /// used by the optimizer, the checkpoint format and gradient checking.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_, F>)> {
        let mut out: Vec<(String, TensorRef<'_, F>)> = vec![
            ("embed.w_x".into(), TensorRef::M(&self.w_x)),
            ("embed.w_y".into(), TensorRef::V(&self.w_y)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("ln1.gamma"), TensorRef::V(&l.ln1.gamma)));
            out.push((p("ln1.beta"), TensorRef::V(&l.ln1.beta)));
            out.push((p("attn.w_q"), TensorRef::M(&l.attn.w_q)));
            out.push((p("attn.b_q"), TensorRef::V(&l.attn.b_q)));
            out.push((p("attn.w_k"), TensorRef::M(&l.attn.w_k)));
            out.push((p("attn.b_k"), TensorRef::V(&l.attn.b_k)));
            out.push((p("attn.w_v"), TensorRef::M(&l.attn.w_v)));
            out.push((p("attn.b_v"), TensorRef::V(&l.attn.b_v)));
            out.push((p("attn.w_o"), TensorRef::M(&l.attn.w_o)));
            out.push((p("attn.b_o"), TensorRef::V(&l.attn.b_o)));
            out.push((p("ln2.gamma"), TensorRef::V(&l.ln2.gamma)));
            out.push((p("ln2.beta"), TensorRef::V(&l.ln2.beta)));
            out.push((p("ff.w1"), TensorRef::M(&l.ff.w1)));
            out.push((p("ff.b1"), TensorRef::V(&l.ff.b1)));
            out.push((p("ff.w2"), TensorRef::M(&l.ff.w2)));
            out.push((p("ff.b2"), TensorRef::V(&l.ff.b2)));
        }
        out.push(("final_ln.gamma".into(), TensorRef::V(&self.final_ln.gamma)));
        out.push(("final_ln.beta".into(), TensorRef::V(&self.final_ln.beta)));
        out.push(("head.w".into(), TensorRef::M(&self.head_w)));
        out.push(("head.b".into(), TensorRef::V(&self.head_b)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        let mut out: Vec<TensorMut<'_, F>> =
            vec![TensorMut::M(&mut self.w_x), TensorMut::V(&mut self.w_y)];
        for l in self.layers.iter_mut() {
            out.push(TensorMut::V(&mut l.ln1.gamma));
            out.push(TensorMut::V(&mut l.ln1.beta));
            out.push(TensorMut::M(&mut l.attn.w_q));
            out.push(TensorMut::V(&mut l.attn.b_q));
            out.push(TensorMut::M(&mut l.attn.w_k));
            out.push(TensorMut::V(&mut l.attn.b_k));
            out.push(TensorMut::M(&mut l.attn.w_v));
            out.push(TensorMut::V(&mut l.attn.b_v));
            out.push(TensorMut::M(&mut l.attn.w_o));
            out.push(TensorMut::V(&mut l.attn.b_o));
            out.push(TensorMut::V(&mut l.ln2.gamma));
            out.push(TensorMut::V(&mut l.ln2.beta));
            out.push(TensorMut::M(&mut l.ff.w1));
            out.push(TensorMut::V(&mut l.ff.b1));
            out.push(TensorMut::M(&mut l.ff.w2));
            out.push(TensorMut::V(&mut l.ff.b2));
        }
        out.push(TensorMut::V(&mut self.final_ln.gamma));
        out.push(TensorMut::V(&mut self.final_ln.beta));
        out.push(TensorMut::M(&mut self.head_w));
        out.push(TensorMut::V(&mut self.head_b));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    /// Name of the first tensor containing a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for (name, t) in self.tensors() {
            if t.as_slice().iter().any(|v| !v.is_finite()) {
                return Some(name);
            }
        }
        None
    }

    /// Global L2 norm over every element (gradient clipping).
    pub fn global_norm(&self) -> F {
        let mut acc = F::zero();
        for (_, t) in self.tensors() {
            for &v in t.as_slice() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale_all(&mut self, factor: F) {
        for mut t in self.tensors_mut() {
            for v in t.as_slice_mut() {
                *v *= factor;
            }
        }
    }

    /// Verify every tensor shape against a config; returns the first
    /// mismatching tensor name on failure.
    pub fn validate_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expect = expected_shapes(cfg);
        let have = self.tensors();
        if have.len() != expect.len() {
            return Err(ModelError::ShapeMismatch {
                tensor: "<tensor count>".into(),
                expected: format!("{}", expect.len()),
                found: format!("{}", have.len()),
            });
        }
        for ((name, t), (ename, eshape)) in have.iter().zip(expect.iter()) {
            if name != ename || &t.shape() != eshape {
                return Err(ModelError::ShapeMismatch {
                    tensor: ename.clone(),
                    expected: format!("{eshape:?}"),
                    found: format!("{} {:?}", name, t.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Canonical (name, shape) list for a config, in tensor order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let dff = cfg.feedforward_dim;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("embed.w_x".into(), vec![cfg.max_features, d]),
        ("embed.w_y".into(), vec![d]),
    ];
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.push((p("ln1.gamma"), vec![d]));
        out.push((p("ln1.beta"), vec![d]));
        out.push((p("attn.w_q"), vec![d, d]));
        out.push((p("attn.b_q"), vec![d]));
        out.push((p("attn.w_k"), vec![d, d]));
        out.push((p("attn.b_k"), vec![d]));
        out.push((p("attn.w_v"), vec![d, d]));
        out.push((p("attn.b_v"), vec![d]));
        out.push((p("attn.w_o"), vec![d, d]));
        out.push((p("attn.b_o"), vec![d]));
        out.push((p("ln2.gamma"), vec![d]));
        out.push((p("ln2.beta"), vec![d]));
        out.push((p("ff.w1"), vec![d, dff]));
        out.push((p("ff.b1"), vec![dff]));
        out.push((p("ff.w2"), vec![dff, d]));
        out.push((p("ff.b2"), vec![d]));
    }
    out.push(("final_ln.gamma".into(), vec![d]));
    out.push(("final_ln.beta".into(), vec![d]));
    out.push(("head.w".into(), vec![d, head_dim(cfg)]));
    out.push(("head.b".into(), vec![head_dim(cfg)]));
    out
}
