//! Tokenization, the masked transformer forward pass, task heads and loss.
//!
//! Attention is evaluated in its structured form: every token scores the
//! support block, and query tokens add a single self term. This is exactly
//! the dense mask of [`super::mask::build_mask`] without materializing the
//! query-query quadrant that the mask forbids anyway.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::config::ModelConfig;
use super::episode::Episode;
use super::params::{LayerNormParams, ModelParams};
use super::ModelError;
use crate::dataio::TaskKind;
use crate::preprocess::Targets;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Query-row outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Output<F: Scalar> {
    /// n_query x max_classes raw logits.
    Logits(Array2<F>),
    /// n_query regression values (in transformed target space).
    Reals(Array1<F>),
}

impl<F: Scalar> Output<F> {
    pub fn n_rows(&self) -> usize {
        match self {
            Output::Logits(m) => m.nrows(),
            Output::Reals(v) => v.len(),
        }
    }
}

pub(crate) struct LnTrace<F: Scalar> {
    pub out: Array2<F>,
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub(crate) struct LayerTrace<F: Scalar> {
    pub ln1: LnTrace<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    pub ctx: Array2<F>,
    pub ln2: LnTrace<F>,
    pub pre_gelu: Array2<F>,
}

pub(crate) struct ForwardTrace<F: Scalar> {
    pub layers: Vec<LayerTrace<F>>,
    pub final_ln: LnTrace<F>,
}

pub(crate) fn layer_norm<F: Scalar>(x: &Array2<F>, p: &LayerNormParams<F>) -> LnTrace<F> {
    let (n, d) = x.dim();
    let eps = F::cast(LN_EPS);
    let inv_d = F::one() / F::from_count(d);
    let mut xhat = Array2::zeros((n, d));
    let mut out = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (x[(i, j)] - mean) * r;
            xhat[(i, j)] = h;
            out[(i, j)] = p.gamma[j] * h + p.beta[j];
        }
    }
    LnTrace { out, xhat, rstd }
}

pub(crate) fn gelu<F: Scalar>(u: F) -> F {
    let c = F::cast(GELU_C);
    let a = F::cast(GELU_A);
    let half = F::cast(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * u * (F::one() + t)
}

pub(crate) fn gelu_prime<F: Scalar>(u: F) -> F {
    let c = F::cast(GELU_C);
    let a = F::cast(GELU_A);
    let half = F::cast(0.5);
    let three = F::cast(3.0);
    let t = (c * (u + a * u * u * u)).tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * u * sech2 * c * (F::one() + three * a * u * u)
}

/// Per-head attention weights in structured form: a dense block over the
/// support columns plus one self weight per query row (zero-length when the
/// self-attention ablation is off).
pub(crate) fn attention_weights<F: Scalar>(
    qa: &ArrayView2<'_, F>,
    ka: &ArrayView2<'_, F>,
    n_support: usize,
    query_self: bool,
) -> (Array2<F>, Array1<F>) {
    let n = qa.nrows();
    let n_query = n - n_support;
    let dk = qa.ncols();
    let scale = F::one() / F::from_count(dk).sqrt();

    let mut scores = qa.dot(&ka.slice(s![..n_support, ..]).t());
    scores.mapv_inplace(|v| v * scale);

    let mut self_scores = Array1::zeros(n_query);
    if query_self {
        for j in 0..n_query {
            let i = n_support + j;
            let mut dot = F::zero();
            for (qv, kv) in qa.row(i).iter().zip(ka.row(i).iter()) {
                dot += *qv * *kv;
            }
            self_scores[j] = dot * scale;
        }
    }

    // Row-wise softmax with max subtraction; query rows include their self
    // slot in the same normalization.
    let mut a_self = Array1::zeros(n_query);
    for i in 0..n {
        let is_query = i >= n_support;
        let j = i.saturating_sub(n_support);
        let mut max = F::neg_infinity();
        for &v in scores.row(i) {
            if v > max {
                max = v;
            }
        }
        if is_query && query_self && self_scores[j] > max {
            max = self_scores[j];
        }
        let mut denom = F::zero();
        for v in scores.row_mut(i) {
            let e = (*v - max).exp();
            *v = e;
            denom += e;
        }
        let self_e = if is_query && query_self {
            let e = (self_scores[j] - max).exp();
            denom += e;
            e
        } else {
            F::zero()
        };
        let inv = F::one() / denom;
        for v in scores.row_mut(i) {
            *v *= inv;
        }
        if is_query && query_self {
            a_self[j] = self_e * inv;
        }
    }
    (scores, a_self)
}

/// Eq.-style tokenization: support token i is `x_i . W_x + y_i * w_y`,
/// query token i is `x_i . W_x`. Support tokens come first in the output.
pub fn embed_tokens<F: Scalar>(e: &Episode<F>, p: &ModelParams<F>) -> Result<Array2<F>, ModelError> {
    let width = p.w_x.nrows();
    if e.width() != width {
        return Err(ModelError::DimensionMismatch(format!(
            "episode width {} != feature projection width {width}",
            e.width()
        )));
    }
    let n_s = e.n_support();
    let n_q = e.n_query();
    let d = p.w_x.ncols();
    if p.w_y.len() != d {
        return Err(ModelError::DimensionMismatch(format!(
            "label projection length {} != hidden dim {d}",
            p.w_y.len()
        )));
    }
    let mut tokens = Array2::zeros((n_s + n_q, d));
    tokens.slice_mut(s![..n_s, ..]).assign(&e.x_support.values.dot(&p.w_x));
    tokens.slice_mut(s![n_s.., ..]).assign(&e.x_query.values.dot(&p.w_x));
    for i in 0..n_s {
        let y = e.y_support.embed_value(i);
        let mut row = tokens.row_mut(i);
        for (t, &w) in row.iter_mut().zip(p.w_y.iter()) {
            *t += w * y;
        }
    }
    Ok(tokens)
}

fn check_episode<F: Scalar>(e: &Episode<F>, c: &ModelConfig) -> Result<(), ModelError> {
    if e.width() != c.max_features {
        return Err(ModelError::DimensionMismatch(format!(
            "episode width {} != model max_features {}",
            e.width(),
            c.max_features
        )));
    }
    match c.task {
        TaskKind::Classification => {
            let k = e
                .n_classes
                .ok_or_else(|| ModelError::InvalidEpisode("classification episode without class count".into()))?;
            if k > c.max_classes {
                return Err(ModelError::InvalidEpisode(format!(
                    "episode has {k} classes, model supports {}",
                    c.max_classes
                )));
            }
            if !matches!(e.y_support, Targets::Classes(_)) {
                return Err(ModelError::InvalidEpisode("classification episode with real-valued labels".into()));
            }
        }
        TaskKind::Regression => {
            if !matches!(e.y_support, Targets::Reals(_)) {
                return Err(ModelError::InvalidEpisode("regression episode with class labels".into()));
            }
        }
    }
    Ok(())
}

pub(crate) fn forward_traced<F: Scalar>(
    e: &Episode<F>,
    p: &ModelParams<F>,
    c: &ModelConfig,
) -> Result<(Output<F>, ForwardTrace<F>), ModelError> {
    check_episode(e, c)?;
    let n_s = e.n_support();
    let n = n_s + e.n_query();
    let d = c.hidden_dim;
    let heads = c.n_heads;
    let dk = d / heads;

    let mut x = embed_tokens(e, p)?;
    let mut layers = Vec::with_capacity(c.n_layers);

    for (li, layer) in p.layers.iter().enumerate() {
        let ln1 = layer_norm(&x, &layer.ln1);
        let q = ln1.out.dot(&layer.attn.w_q) + &layer.attn.b_q;
        let k = ln1.out.dot(&layer.attn.w_k) + &layer.attn.b_k;
        let v = ln1.out.dot(&layer.attn.w_v) + &layer.attn.b_v;

        let mut ctx = Array2::zeros((n, d));
        for a in 0..heads {
            let cols = s![.., a * dk..(a + 1) * dk];
            let qa = q.slice(cols);
            let ka = k.slice(cols);
            let va = v.slice(cols);
            let (weights, a_self) = attention_weights(&qa, &ka, n_s, c.query_self_attend);
            let mut ctx_a = weights.dot(&va.slice(s![..n_s, ..]));
            if c.query_self_attend {
                for j in 0..(n - n_s) {
                    let i = n_s + j;
                    let w = a_self[j];
                    let src = va.row(i);
                    let mut dst = ctx_a.row_mut(i);
                    for (dv, &sv) in dst.iter_mut().zip(src.iter()) {
                        *dv += w * sv;
                    }
                }
            }
            ctx.slice_mut(cols).assign(&ctx_a);
        }

        let attn_out = ctx.dot(&layer.attn.w_o) + &layer.attn.b_o;
        let x_mid = &x + &attn_out;
        let ln2 = layer_norm(&x_mid, &layer.ln2);
        let pre_gelu = ln2.out.dot(&layer.ff.w1) + &layer.ff.b1;
        let activated = pre_gelu.mapv(gelu);
        let ff_out = activated.dot(&layer.ff.w2) + &layer.ff.b2;
        let x_next = &x_mid + &ff_out;

        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteActivation { layer: li });
        }

        layers.push(LayerTrace { ln1, q, k, v, ctx, ln2, pre_gelu });
        x = x_next;
    }

    let final_ln = layer_norm(&x, &p.final_ln);
    let head_in = final_ln.out.slice(s![n_s.., ..]);
    let out_mat = head_in.dot(&p.head_w) + &p.head_b;
    if out_mat.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteActivation { layer: c.n_layers });
    }

    let output = match c.task {
        TaskKind::Classification => Output::Logits(out_mat),
        TaskKind::Regression => Output::Reals(out_mat.column(0).to_owned()),
    };
    Ok((output, ForwardTrace { layers, final_ln }))
}

/// Run the transformer over an episode and return the query outputs.
pub fn forward<F: Scalar>(e: &Episode<F>, p: &ModelParams<F>, c: &ModelConfig) -> Result<Output<F>, ModelError> {
    forward_traced(e, p, c).map(|(o, _)| o)
}

/// Stable softmax over the first `k` entries of a logit row.
pub(crate) fn softmax_first_k<F: Scalar>(logits: &[F], k: usize) -> Vec<F> {
    let mut max = F::neg_infinity();
    for &v in &logits[..k] {
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<F> = logits[..k].iter().map(|&v| (v - max).exp()).collect();
    let denom: F = out.iter().copied().sum();
    for v in &mut out {
        *v /= denom;
    }
    out
}

/// Class probabilities for a classification episode: softmax over the first
/// K logits, where K is the episode's class count.
pub fn predict_proba<F: Scalar>(
    e: &Episode<F>,
    p: &ModelParams<F>,
    c: &ModelConfig,
) -> Result<Array2<F>, ModelError> {
    let k = e
        .n_classes
        .ok_or_else(|| ModelError::InvalidEpisode("predict_proba needs a classification episode".into()))?;
    match forward(e, p, c)? {
        Output::Logits(logits) => {
            let mut out = Array2::zeros((logits.nrows(), k));
            for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
                let probs = softmax_first_k(row.as_slice().expect("contiguous"), k);
                for (j, v) in probs.into_iter().enumerate() {
                    out[(i, j)] = v;
                }
            }
            Ok(out)
        }
        Output::Reals(_) => Err(ModelError::InvalidEpisode("predict_proba on a regression model".into())),
    }
}

/// Index of the row maximum, smallest index on ties.
pub fn argmax_row<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Mean loss over query observations: cross-entropy over the episode's K
/// classes for classification, squared error for regression.
pub fn loss<F: Scalar>(out: &Output<F>, y: &Targets<F>, n_classes: Option<usize>) -> Result<F, ModelError> {
    loss_grad(out, y, n_classes).map(|(l, _)| l)
}

/// Loss plus its gradient w.r.t. the head output matrix (mean reduction).
pub(crate) fn loss_grad<F: Scalar>(
    out: &Output<F>,
    y: &Targets<F>,
    n_classes: Option<usize>,
) -> Result<(F, Array2<F>), ModelError> {
    if out.n_rows() != y.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} outputs for {} targets",
            out.n_rows(),
            y.len()
        )));
    }
    match (out, y) {
        (Output::Logits(logits), Targets::Classes(targets)) => {
            let k = n_classes
                .ok_or_else(|| ModelError::InvalidEpisode("classification loss needs a class count".into()))?;
            let n = logits.nrows();
            let inv_n = F::one() / F::from_count(n);
            let mut total = F::zero();
            let mut grad = Array2::zeros(logits.raw_dim());
            for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
                let target = targets[i];
                if target >= k {
                    return Err(ModelError::InvalidEpisode(format!(
                        "target class {target} outside 0..{k}"
                    )));
                }
                let slice = row.as_slice().expect("contiguous");
                let probs = softmax_first_k(slice, k);
                // -ln p computed through log-sum-exp for stability
                let mut max = F::neg_infinity();
                for &v in &slice[..k] {
                    if v > max {
                        max = v;
                    }
                }
                let mut lse = F::zero();
                for &v in &slice[..k] {
                    lse += (v - max).exp();
                }
                let lse = lse.ln() + max;
                total += lse - slice[target];
                for c in 0..k {
                    let indicator = if c == target { F::one() } else { F::zero() };
                    grad[(i, c)] = (probs[c] - indicator) * inv_n;
                }
            }
            Ok((total * inv_n, grad))
        }
        (Output::Reals(preds), Targets::Reals(targets)) => {
            let n = preds.len();
            let inv_n = F::one() / F::from_count(n);
            let mut total = F::zero();
            let mut grad = Array2::zeros((n, 1));
            let two = F::cast(2.0);
            for i in 0..n {
                let diff = preds[i] - targets[i];
                total += diff * diff;
                grad[(i, 0)] = two * diff * inv_n;
            }
            Ok((total * inv_n, grad))
        }
        _ => Err(ModelError::InvalidEpisode("output kind does not match target kind".into())),
    }
}
