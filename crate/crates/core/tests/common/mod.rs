//! Independent reference implementations used as test oracles. Each one is
//! written directly from the defining formula with plain loops.

#![allow(dead_code)]

use relattn::tensor::RngState;

pub fn random_vec(rng: &mut RngState, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-scale, scale)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Softmax of one row; masked entries get probability zero.
pub fn softmax(row: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..row.len()).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..row.len()).map(|j| if keep(j) { (row[j] - max).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Per-row normalization over the last axis of `x[rows, d]`.
pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let (m, v) = mean_var(row);
        for c in 0..d {
            out.push(gamma[c] * (row[c] - m) / (v + eps).sqrt() + beta[c]);
        }
    }
    out
}

/// Per-channel normalization over the valid rows of `x[rows, d]`; masked
/// rows give zeros.
pub fn batch_norm(x: &[f64], d: usize, mask: &[bool], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for c in 0..d {
        let col: Vec<f64> = (0..rows).filter(|&r| mask[r]).map(|r| x[r * d + c]).collect();
        let (m, v) = mean_var(&col);
        for r in (0..rows).filter(|&r| mask[r]) {
            out[r * d + c] = gamma[c] * (x[r * d + c] - m) / (v + eps).sqrt() + beta[c];
        }
    }
    out
}

/// Mean of `-log softmax(logits_b)[label_b]`.
pub fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let p = softmax(row, None);
        total -= p[y].ln();
    }
    total / labels.len() as f64
}

/// Column `j` of `M` for query `i` (both 0-based) from a table whose centre
/// row holds `m_0`.
pub fn m_vector(table: &[Vec<f64>], i: usize, j: usize) -> &[f64] {
    let center = (table.len() - 1) / 2;
    &table[(center as isize + j as isize - i as isize) as usize]
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Project each row of `e` (n×D) by `w` (D×dh).
pub fn project(e: &[Vec<f64>], w: &[f64], dh: usize) -> Vec<Vec<f64>> {
    e.iter()
        .map(|row| (0..dh).map(|c| (0..row.len()).map(|p| row[p] * w[p * dh + c]).sum()).collect())
        .collect()
}

/// One attention head for a single sentence, written from
/// `h_i = V softmax(Kᵀq + Mᵀr)` with explicit per-query `M_i`.
#[allow(clippy::too_many_arguments)]
pub fn attention_head(
    e: &[Vec<f64>],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wr: Option<(&[f64], &[Vec<f64>])>,
    dh: usize,
    scale: bool,
    mask: &[bool],
) -> Vec<Vec<f64>> {
    let n = e.len();
    let (q, k, v) = (project(e, wq, dh), project(e, wk, dh), project(e, wv, dh));
    let r = wr.map(|(w, _)| project(e, w, dh));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut scores: Vec<f64> = (0..n).map(|j| dot(&k[j], &q[i])).collect();
        if let (Some(r), Some((_, table))) = (&r, wr) {
            for (j, s) in scores.iter_mut().enumerate() {
                *s += dot(m_vector(table, i, j), &r[i]);
            }
        }
        if scale {
            scores.iter_mut().for_each(|s| *s /= (dh as f64).sqrt());
        }
        let a = softmax(&scores, Some(mask));
        out.push((0..dh).map(|c| (0..n).map(|j| a[j] * v[j][c]).sum()).collect());
    }
    out
}

/// Position-aware attention for one sentence:
/// `u_i = vᵀ tanh(W_h h_i + W_q q + W_s ps_i + W_o po_i)`, `a = softmax(u)`,
/// `z = Σ a_i h_i`. Returns `(u, a, z)`.
#[allow(clippy::too_many_arguments)]
pub fn position_aware(
    h: &[Vec<f64>],
    q: &[f64],
    ps: &[Vec<f64>],
    po: &[Vec<f64>],
    wh: &[f64],
    wq: &[f64],
    ws: &[f64],
    wo: &[f64],
    v: &[f64],
    mask: &[bool],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let da = v.len();
    let d = q.len();
    let dp = ps[0].len();
    let lin = |x: &[f64], w: &[f64], c: usize, width: usize| -> f64 { (0..width).map(|p| x[p] * w[p * da + c]).sum() };
    let u: Vec<f64> = (0..h.len())
        .map(|i| {
            (0..da)
                .map(|c| {
                    let pre = lin(&h[i], wh, c, d) + lin(q, wq, c, d) + lin(&ps[i], ws, c, dp) + lin(&po[i], wo, c, dp);
                    v[c] * pre.tanh()
                })
                .sum()
        })
        .collect();
    let a = softmax(&u, Some(mask));
    let z = (0..d).map(|c| (0..h.len()).map(|i| a[i] * h[i][c]).sum()).collect();
    (u, a, z)
}

/// Brute-force micro P/R/F1 with `na` excluded from credit.
pub fn micro_prf(gold: &[usize], pred: &[usize], na: usize) -> (f64, f64, f64) {
    let mut correct = 0usize;
    let mut predicted = 0usize;
    let mut relevant = 0usize;
    for i in 0..gold.len() {
        if pred[i] != na {
            predicted += 1;
        }
        if gold[i] != na {
            relevant += 1;
        }
        if pred[i] != na && pred[i] == gold[i] {
            correct += 1;
        }
    }
    let p = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
    let r = if relevant == 0 { 0.0 } else { correct as f64 / relevant as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

pub mod cases;
pub mod fixtures;
