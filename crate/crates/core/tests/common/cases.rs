//! Random small instances comparing library computations to the oracles.
//! Each function returns the largest absolute deviation observed.

#![allow(dead_code)]

use relattn::encoder::{attention_head, EncoderConfig, PositionMode};
use relattn::eval;
use relattn::model::ForwardMode;
use relattn::posattn::position_aware_attention;
use relattn::tensor::{ParamStore, RngState, Tape, Tensor};

use super::*;

fn dims(rng: &mut RngState, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub fn matmul_case(rng: &mut RngState) -> f64 {
    let (m, k, n) = (dims(rng, 1, 6), dims(rng, 1, 6), dims(rng, 1, 6));
    let a = random_vec(rng, m * k, 2.0);
    let b = random_vec(rng, k * n, 2.0);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let va = tape.leaf(Tensor::new(&[m, k], a.clone()).unwrap());
    let vb = tape.leaf(Tensor::new(&[k, n], b.clone()).unwrap());
    let c = tape.matmul(va, vb).unwrap();
    max_abs_diff(tape.value(c).data(), &matmul(&a, &b, m, k, n))
}

pub fn softmax_case(rng: &mut RngState) -> f64 {
    let (b, k) = (dims(rng, 1, 4), dims(rng, 1, 7));
    let x = random_vec(rng, b * k, 5.0);
    let mut mask: Vec<bool> = (0..b * k).map(|_| rng.bernoulli(0.7)).collect();
    for r in 0..b {
        mask[r * k + rng.below(k)] = true;
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let v = tape.leaf(Tensor::new(&[b, k], x.clone()).unwrap());
    let s = tape.softmax(v, Some(&mask)).unwrap();
    let expect: Vec<f64> = (0..b)
        .flat_map(|r| softmax(&x[r * k..(r + 1) * k], Some(&mask[r * k..(r + 1) * k])))
        .collect();
    max_abs_diff(tape.value(s).data(), &expect)
}

pub fn layer_norm_case(rng: &mut RngState) -> f64 {
    let (rows, d) = (dims(rng, 1, 5), dims(rng, 2, 8));
    let x = random_vec(rng, rows * d, 3.0);
    let g = random_vec(rng, d, 1.5);
    let be = random_vec(rng, d, 1.0);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let vx = tape.leaf(Tensor::new(&[rows, d], x.clone()).unwrap());
    let vg = tape.leaf(Tensor::new(&[d], g.clone()).unwrap());
    let vb = tape.leaf(Tensor::new(&[d], be.clone()).unwrap());
    let y = tape.layer_norm(vx, vg, vb, 1e-5).unwrap();
    max_abs_diff(tape.value(y).data(), &layer_norm(&x, d, &g, &be, 1e-5))
}

pub fn batch_norm_case(rng: &mut RngState) -> f64 {
    let (rows, d) = (dims(rng, 2, 8), dims(rng, 1, 6));
    let x = random_vec(rng, rows * d, 3.0);
    let g = random_vec(rng, d, 1.5);
    let be = random_vec(rng, d, 1.0);
    let mut mask: Vec<bool> = (0..rows).map(|_| rng.bernoulli(0.75)).collect();
    mask[0] = true;
    mask[rows - 1] = true;
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let vx = tape.leaf(Tensor::new(&[rows, d], x.clone()).unwrap());
    let vg = tape.leaf(Tensor::new(&[d], g.clone()).unwrap());
    let vb = tape.leaf(Tensor::new(&[d], be.clone()).unwrap());
    let (y, _) = tape.batch_norm(vx, vg, vb, &mask, None, 1e-5).unwrap();
    max_abs_diff(tape.value(y).data(), &batch_norm(&x, d, &mask, &g, &be, 1e-5))
}

pub fn cross_entropy_case(rng: &mut RngState) -> f64 {
    let (b, c) = (dims(rng, 1, 6), dims(rng, 2, 9));
    let logits = random_vec(rng, b * c, 4.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let v = tape.leaf(Tensor::new(&[b, c], logits.clone()).unwrap());
    let l = tape.cross_entropy(v, &labels).unwrap();
    (tape.scalar(l) - cross_entropy(&logits, c, &labels)).abs()
}

/// One sentence of `n` tokens, width `d`, head width `dh`, relative scores
/// on, with a random relative table spanning `max_len`.
pub fn attention_head_case(rng: &mut RngState, n: usize, d: usize, dh: usize, max_len: usize) -> f64 {
    let e: Vec<Vec<f64>> = (0..n).map(|_| random_vec(rng, d, 1.5)).collect();
    let w: Vec<Vec<f64>> = (0..4).map(|_| random_vec(rng, d * dh, 1.0)).collect();
    let table: Vec<Vec<f64>> = (0..2 * max_len - 1).map(|_| random_vec(rng, dh, 1.0)).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.8)).collect();
    mask[rng.below(n)] = true;
    let scale = rng.bernoulli(0.5);

    let mut store = ParamStore::new();
    for (name, data) in ["h.wq", "h.wk", "h.wv", "h.wr"].iter().zip(&w) {
        store.insert(*name, Tensor::new(&[d, dh], data.clone()).unwrap());
    }
    let flat: Vec<f64> = table.iter().flatten().copied().collect();
    store.insert("h.rel", Tensor::new(&[2 * max_len - 1, dh], flat).unwrap());
    let cfg = EncoderConfig {
        position_mode: PositionMode::Relative,
        scale_scores: scale,
        max_len,
        ..Default::default()
    };
    let mut tape = Tape::new(&store);
    let ev = tape.leaf(Tensor::new(&[1, n, d], e.iter().flatten().copied().collect()).unwrap());
    let trace = attention_head(&mut tape, &cfg, "h", ev, &mask, ForwardMode::Eval, &mut RngState::new(0)).unwrap();
    let expect = super::attention_head(&e, &w[0], &w[1], &w[2], Some((&w[3], &table)), dh, scale, &mask);
    let flat: Vec<f64> = expect.into_iter().flatten().collect();
    max_abs_diff(tape.value(trace.out).data(), &flat)
}

/// Position-aware attention on one sentence with random weights and random
/// position-embedding rows.
pub fn posattn_case(rng: &mut RngState) -> f64 {
    let (n, d, dp, da) = (dims(rng, 1, 6), dims(rng, 2, 6), dims(rng, 1, 4), dims(rng, 1, 5));
    let rows = 9;
    let h: Vec<Vec<f64>> = (0..n).map(|_| random_vec(rng, d, 1.5)).collect();
    let q = random_vec(rng, d, 1.5);
    let mut p_table: Vec<Vec<f64>> = (0..rows).map(|_| random_vec(rng, dp, 1.0)).collect();
    p_table[0] = vec![0.0; dp];
    let subj: Vec<usize> = (0..n).map(|_| 1 + rng.below(rows - 1)).collect();
    let obj: Vec<usize> = (0..n).map(|_| 1 + rng.below(rows - 1)).collect();
    let (wh, wq) = (random_vec(rng, d * da, 1.0), random_vec(rng, d * da, 1.0));
    let (ws, wo) = (random_vec(rng, dp * da, 1.0), random_vec(rng, dp * da, 1.0));
    let v = random_vec(rng, da, 1.0);
    let mut mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.8)).collect();
    mask[rng.below(n)] = true;

    let mut store = ParamStore::new();
    store.insert("pa.P", Tensor::new(&[rows, dp], p_table.iter().flatten().copied().collect()).unwrap());
    store.insert("pa.wh", Tensor::new(&[d, da], wh.clone()).unwrap());
    store.insert("pa.wq", Tensor::new(&[d, da], wq.clone()).unwrap());
    store.insert("pa.ws", Tensor::new(&[dp, da], ws.clone()).unwrap());
    store.insert("pa.wo", Tensor::new(&[dp, da], wo.clone()).unwrap());
    store.insert("pa.v", Tensor::new(&[da, 1], v.clone()).unwrap());
    let mut tape = Tape::new(&store);
    let hv = tape.leaf(Tensor::new(&[1, n, d], h.iter().flatten().copied().collect()).unwrap());
    let qv = tape.leaf(Tensor::new(&[1, d], q.clone()).unwrap());
    let t = position_aware_attention(&mut tape, hv, qv, &subj, &obj, &mask).unwrap();

    let ps: Vec<Vec<f64>> = subj.iter().map(|&r| p_table[r].clone()).collect();
    let po: Vec<Vec<f64>> = obj.iter().map(|&r| p_table[r].clone()).collect();
    let (u, a, z) = position_aware(&h, &q, &ps, &po, &wh, &wq, &ws, &wo, &v, &mask);
    let got_u: Vec<f64> = tape.value(t.u).data().to_vec();
    let u_err = (0..n).filter(|&i| mask[i]).map(|i| (got_u[i] - u[i]).abs()).fold(0.0, f64::max);
    u_err
        .max(max_abs_diff(tape.value(t.a).data(), &a))
        .max(max_abs_diff(tape.value(t.z).data(), &z))
}

/// Returns true when the library's counts and ratios match the brute-force
/// oracle exactly.
pub fn micro_prf_case(rng: &mut RngState) -> bool {
    let n = dims(rng, 1, 30);
    let gold: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
    let pred: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
    let r = eval::micro_prf(&gold, &pred, 0).unwrap();
    let (p, rc, f) = micro_prf(&gold, &pred, 0);
    r.precision == p && r.recall == rc && r.f1 == f
}
