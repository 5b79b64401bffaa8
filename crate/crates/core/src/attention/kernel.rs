//! Gather-based neighborhood attention kernel.
//!
//! Inputs are `[tokens, heads * head_dim]` row-major. Logits for query `i`
//! and neighbor `j` in head `h` are `(q_i · k_j + bias_h[offset(i, j)]) /
//! sqrt(head_dim)`. Attention weights are kept for the backward pass in
//! slot-major order: `weights[slot * heads + h]`.

use super::NeighborhoodPlan;
use crate::graph::{dot_wide, narrow};
use crate::tensor::{c, Scalar};

pub(crate) fn forward<T: Scalar>(
    plan: &NeighborhoodPlan,
    heads: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let tokens = plan.tokens();
    let dim = q.len() / tokens;
    let hd = dim / heads;
    let table = plan.bias_table_len();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut acc = vec![0.0f64; hd];
    let mut wide = Vec::new();
    let mut weights = vec![T::zero(); plan.slots() * heads];
    for i in 0..tokens {
        let slots = plan.slot_range(i);
        for h in 0..heads {
            let qi = &q[i * dim + h * hd..i * dim + (h + 1) * hd];
            wide.clear();
            for s in slots.clone() {
                let j = plan.neighbor(s);
                let mut a = dot_wide(qi, &k[j * dim + h * hd..j * dim + (h + 1) * hd]);
                if let Some(b) = bias {
                    a += b[h * table + plan.bias_slot(s)].as_f64();
                }
                wide.push(a * scale);
            }
            let max = wide.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            wide.iter_mut().for_each(|l| *l = (*l - max).exp());
            let inv = 1.0 / wide.iter().sum::<f64>();
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (n, s) in slots.clone().enumerate() {
                let w = wide[n] * inv;
                weights[s * heads + h] = c(w);
                let j = plan.neighbor(s);
                for (o, &vv) in acc.iter_mut().zip(&v[j * dim + h * hd..j * dim + (h + 1) * hd]) {
                    *o += w * vv.as_f64();
                }
            }
            for (o, &a) in out[i * dim + h * hd..i * dim + (h + 1) * hd].iter_mut().zip(&acc) {
                *o = c(a);
            }
        }
    }
    (out, weights)
}

pub(crate) struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dbias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    plan: &NeighborhoodPlan,
    heads: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    weights: &[T],
    gout: &[T],
    want_bias: bool,
) -> AttentionGrads<T> {
    let tokens = plan.tokens();
    let dim = q.len() / tokens;
    let hd = dim / heads;
    let table = plan.bias_table_len();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0f64; q.len()];
    let mut dk = vec![0.0f64; k.len()];
    let mut dv = vec![0.0f64; v.len()];
    let mut dbias = want_bias.then(|| vec![0.0f64; heads * table]);
    let mut dw = Vec::new();
    for i in 0..tokens {
        let slots = plan.slot_range(i);
        for h in 0..heads {
            let go = &gout[i * dim + h * hd..i * dim + (h + 1) * hd];
            dw.clear();
            let mut weighted = 0.0;
            for s in slots.clone() {
                let j = plan.neighbor(s);
                let w = weights[s * heads + h].as_f64();
                let d = dot_wide(go, &v[j * dim + h * hd..j * dim + (h + 1) * hd]);
                weighted += w * d;
                dw.push(d);
                for (g, &o) in dv[j * dim + h * hd..j * dim + (h + 1) * hd].iter_mut().zip(go) {
                    *g += w * o.as_f64();
                }
            }
            let qi = &q[i * dim + h * hd..i * dim + (h + 1) * hd];
            for (n, s) in slots.clone().enumerate() {
                let j = plan.neighbor(s);
                // Gradient w.r.t. the pre-scale logit q·k + bias.
                let dl = weights[s * heads + h].as_f64() * (dw[n] - weighted) * scale;
                if let Some(db) = dbias.as_mut() {
                    db[h * table + plan.bias_slot(s)] += dl;
                }
                let kj = &k[j * dim + h * hd..j * dim + (h + 1) * hd];
                for (g, &kk) in dq[i * dim + h * hd..i * dim + (h + 1) * hd].iter_mut().zip(kj) {
                    *g += dl * kk.as_f64();
                }
                for (g, &qq) in dk[j * dim + h * hd..j * dim + (h + 1) * hd].iter_mut().zip(qi) {
                    *g += dl * qq.as_f64();
                }
            }
        }
    }
    AttentionGrads {
        dq: narrow(dq),
        dk: narrow(dk),
        dv: narrow(dv),
        dbias: dbias.map(narrow),
    }
}
