//! Exact reverse-mode gradients for the embed -> transformer -> head -> loss
//! composite. The trace captured by the forward pass supplies every needed
//! intermediate; attention weights are recomputed per head instead of cached,
//! trading one extra score product for O(n^2) memory.

use ndarray::{s, Array1, Array2, Axis};

use super::config::ModelConfig;
use super::episode::Episode;
use super::forward::{attention_weights, forward_traced, gelu, gelu_prime, loss_grad, LnTrace};
use super::params::{LayerNormParams, ModelParams};
use super::ModelError;
use crate::scalar::Scalar;

fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    trace: &LnTrace<F>,
    p: &LayerNormParams<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (n, d) = dy.dim();
    let inv_d = F::one() / F::from_count(d);
    let mut dx = Array2::zeros((n, d));
    let mut dgamma = Array1::zeros(d);
    let mut dbeta = Array1::zeros(d);
    for i in 0..n {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            let g = dy[(i, j)] * p.gamma[j];
            mean_dxhat += g;
            mean_dxhat_xhat += g * trace.xhat[(i, j)];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = trace.rstd[i];
        for j in 0..d {
            let g = dy[(i, j)] * p.gamma[j];
            dx[(i, j)] = r * (g - mean_dxhat - trace.xhat[(i, j)] * mean_dxhat_xhat);
            dgamma[j] += dy[(i, j)] * trace.xhat[(i, j)];
            dbeta[j] += dy[(i, j)];
        }
    }
    (dx, dgamma, dbeta)
}

fn column_sums<F: Scalar>(m: &Array2<F>) -> Array1<F> {
    m.sum_axis(Axis(0))
}

/// Gradient of the mean episode loss w.r.t. every parameter. Returns the
/// loss value alongside a parameter-shaped gradient container.
pub fn backward<F: Scalar>(
    e: &Episode<F>,
    p: &ModelParams<F>,
    c: &ModelConfig,
) -> Result<(F, ModelParams<F>), ModelError> {
    let y_query = e
        .y_query
        .as_ref()
        .ok_or_else(|| ModelError::InvalidEpisode("backward needs query targets".into()))?;
    let (out, trace) = forward_traced(e, p, c)?;
    let (loss_value, dout) = loss_grad(&out, y_query, e.n_classes)?;

    let n_s = e.n_support();
    let n = n_s + e.n_query();
    let d = c.hidden_dim;
    let heads = c.n_heads;
    let dk = d / heads;
    let scale = F::one() / F::from_count(dk).sqrt();

    let mut grads = p.zeros_like();

    // Head: only query rows feed it.
    let head_in = trace.final_ln.out.slice(s![n_s.., ..]);
    grads.head_w = head_in.t().dot(&dout);
    grads.head_b = column_sums(&dout);
    let mut d_final = Array2::zeros((n, d));
    d_final.slice_mut(s![n_s.., ..]).assign(&dout.dot(&p.head_w.t()));

    let (mut dx, dgamma, dbeta) = layer_norm_backward(&d_final, &trace.final_ln, &p.final_ln);
    grads.final_ln.gamma = dgamma;
    grads.final_ln.beta = dbeta;

    for (li, layer) in p.layers.iter().enumerate().rev() {
        let t = &trace.layers[li];
        let g = &mut grads.layers[li];

        // Feed-forward branch (x_out = x_mid + ff(ln2(x_mid))).
        let activated = t.pre_gelu.mapv(gelu);
        g.ff.w2 = activated.t().dot(&dx);
        g.ff.b2 = column_sums(&dx);
        let d_act = dx.dot(&layer.ff.w2.t());
        let mut du = d_act;
        du.zip_mut_with(&t.pre_gelu, |dv, &u| *dv *= gelu_prime(u));
        g.ff.w1 = t.ln2.out.t().dot(&du);
        g.ff.b1 = column_sums(&du);
        let dh2 = du.dot(&layer.ff.w1.t());
        let (dx_mid_ln, dg2, db2) = layer_norm_backward(&dh2, &t.ln2, &layer.ln2);
        g.ln2.gamma = dg2;
        g.ln2.beta = db2;
        let dx_mid = &dx + &dx_mid_ln;

        // Attention branch (x_mid = x_in + W_o ctx + b_o).
        g.attn.w_o = t.ctx.t().dot(&dx_mid);
        g.attn.b_o = column_sums(&dx_mid);
        let dctx = dx_mid.dot(&layer.attn.w_o.t());

        let mut dq = Array2::zeros((n, d));
        let mut dkm = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for a in 0..heads {
            let cols = s![.., a * dk..(a + 1) * dk];
            let qa = t.q.slice(cols);
            let ka = t.k.slice(cols);
            let va = t.v.slice(cols);
            let dctx_a = dctx.slice(cols);

            let (weights, a_self) = attention_weights(&qa, &ka, n_s, c.query_self_attend);

            // dV
            let dva = weights.t().dot(&dctx_a); // (n_s, dk)
            dv.slice_mut(s![..n_s, a * dk..(a + 1) * dk])
                .zip_mut_with(&dva.view(), |acc, &v| *acc += v);
            if c.query_self_attend {
                for j in 0..(n - n_s) {
                    let i = n_s + j;
                    let w = a_self[j];
                    let src = dctx_a.row(i);
                    let mut dst = dv.slice_mut(s![i, a * dk..(a + 1) * dk]);
                    for (dvx, &sv) in dst.iter_mut().zip(src.iter()) {
                        *dvx += w * sv;
                    }
                }
            }

            // dA over the support block and the self slots.
            let mut d_weights = dctx_a.dot(&va.slice(s![..n_s, ..]).t()); // (n, n_s)
            let mut d_self = Array1::zeros(n - n_s);
            if c.query_self_attend {
                for j in 0..(n - n_s) {
                    let i = n_s + j;
                    let mut acc = F::zero();
                    for (dc, &vv) in dctx_a.row(i).iter().zip(va.row(i).iter()) {
                        acc += *dc * vv;
                    }
                    d_self[j] = acc;
                }
            }

            // Softmax backward per attender row, self slot included in the
            // same normalization for query rows.
            for i in 0..n {
                let is_query = i >= n_s;
                let j = i.saturating_sub(n_s);
                let mut dot = F::zero();
                for (w, dw) in weights.row(i).iter().zip(d_weights.row(i).iter()) {
                    dot += *w * *dw;
                }
                if is_query && c.query_self_attend {
                    dot += a_self[j] * d_self[j];
                }
                for (w, dw) in weights.row(i).iter().zip(d_weights.row_mut(i).iter_mut()) {
                    *dw = *w * (*dw - dot);
                }
                if is_query && c.query_self_attend {
                    d_self[j] = a_self[j] * (d_self[j] - dot);
                }
            }

            // dQ and dK through the scaled score product.
            let mut dqa = d_weights.dot(&ka.slice(s![..n_s, ..]));
            dqa.mapv_inplace(|v| v * scale);
            let mut dka_sup = d_weights.t().dot(&qa);
            dka_sup.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).zip_mut_with(&dqa.view(), |acc, &v| *acc += v);
            dkm.slice_mut(s![..n_s, a * dk..(a + 1) * dk])
                .zip_mut_with(&dka_sup.view(), |acc, &v| *acc += v);
            if c.query_self_attend {
                for j in 0..(n - n_s) {
                    let i = n_s + j;
                    let ds = d_self[j] * scale;
                    let krow = ka.row(i);
                    let qrow = qa.row(i);
                    let mut dqrow = dq.slice_mut(s![i, a * dk..(a + 1) * dk]);
                    for (dst, &kv) in dqrow.iter_mut().zip(krow.iter()) {
                        *dst += ds * kv;
                    }
                    let mut dkrow = dkm.slice_mut(s![i, a * dk..(a + 1) * dk]);
                    for (dst, &qv) in dkrow.iter_mut().zip(qrow.iter()) {
                        *dst += ds * qv;
                    }
                }
            }
        }

        g.attn.w_q = t.ln1.out.t().dot(&dq);
        g.attn.b_q = column_sums(&dq);
        g.attn.w_k = t.ln1.out.t().dot(&dkm);
        g.attn.b_k = column_sums(&dkm);
        g.attn.w_v = t.ln1.out.t().dot(&dv);
        g.attn.b_v = column_sums(&dv);

        let dh1 = dq.dot(&layer.attn.w_q.t()) + dkm.dot(&layer.attn.w_k.t()) + dv.dot(&layer.attn.w_v.t());
        let (dx_in_ln, dg1, db1) = layer_norm_backward(&dh1, &t.ln1, &layer.ln1);
        g.ln1.gamma = dg1;
        g.ln1.beta = db1;
        dx = dx_mid + dx_in_ln;
    }

    // Embedding: dW_x collects from every token, dw_y from support tokens.
    let d_tokens = dx;
    let d_sup = d_tokens.slice(s![..n_s, ..]);
    let d_query = d_tokens.slice(s![n_s.., ..]);
    grads.w_x = e.x_support.values.t().dot(&d_sup) + e.x_query.values.t().dot(&d_query);
    let mut dw_y = Array1::zeros(d);
    for i in 0..n_s {
        let y = e.y_support.embed_value(i);
        for (acc, &g) in dw_y.iter_mut().zip(d_tokens.row(i).iter()) {
            *acc += y * g;
        }
    }
    grads.w_y = dw_y;

    if let Some(tensor) = grads.first_non_finite() {
        return Err(ModelError::NonFiniteGradient { tensor });
    }
    Ok((loss_value, grads))
}
