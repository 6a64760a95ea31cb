//! Straight-line scalar reimplementation of the network, used as an oracle.
//!
//! Nothing here touches the tape or the batched graph builders; every quantity is computed
//! with explicit loops over `f64` slices, one sequence at a time.

#![allow(dead_code)]

pub mod metric_oracle;
pub mod toy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use translit::data::{BOS, EOS, PAD};
use translit::model::{GruWeights, ModelDims, ModelParams};
use translit::Tensor;

pub fn dims(src_vocab: usize, tgt_vocab: usize, embed: usize, hidden: usize, attention: usize) -> ModelDims {
    ModelDims {
        src_vocab,
        tgt_vocab,
        embed,
        hidden,
        attention,
    }
}

/// Parameters with every entry (biases included) uniform in `±range`.
pub fn random_params(dims: ModelDims, range: f64, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    for t in p.tensors_mut() {
        *t = Tensor::uniform(t.shape(), range, &mut rng);
    }
    p
}

pub fn random_ids(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(4..vocab as u32)).collect()
}

/// `x · W` for `W: [in × out]`.
pub fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(rows, x.len());
    let mut out = vec![0.0; cols];
    for j in 0..cols {
        for i in 0..rows {
            out[j] += x[i] * w.data()[i * cols + j];
        }
    }
    out
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gru(w: &GruWeights<Tensor>, x: &[f64], h: &[f64]) -> Vec<f64> {
    let xz = vecmat(x, &w.w_z);
    let hz = vecmat(h, &w.u_z);
    let xr = vecmat(x, &w.w_r);
    let hr = vecmat(h, &w.u_r);
    let d = h.len();
    let z: Vec<f64> = (0..d).map(|i| sig(xz[i] + hz[i] + w.b_z.data()[i])).collect();
    let r: Vec<f64> = (0..d).map(|i| sig(xr[i] + hr[i] + w.b_r.data()[i])).collect();
    let rh: Vec<f64> = (0..d).map(|i| r[i] * h[i]).collect();
    let xh = vecmat(x, &w.w_h);
    let hh = vecmat(&rh, &w.u_h);
    (0..d)
        .map(|i| {
            let cand = (xh[i] + hh[i] + w.b_h.data()[i]).tanh();
            (1.0 - z[i]) * h[i] + z[i] * cand
        })
        .collect()
}

pub fn embed(table: &Tensor, id: u32) -> Vec<f64> {
    table.row(id as usize).to_vec()
}

/// Context rows `[fwd_t ‖ bwd_t]` for an unpadded source.
pub fn encode(p: &ModelParams, src: &[u32]) -> Vec<Vec<f64>> {
    let d = p.dims().hidden;
    let mut fwd = vec![vec![0.0; d]; src.len()];
    let mut h = vec![0.0; d];
    for (t, &id) in src.iter().enumerate() {
        h = gru(&p.enc_fwd, &embed(&p.src_embed, id), &h);
        fwd[t] = h.clone();
    }
    let mut bwd = vec![vec![0.0; d]; src.len()];
    let mut h = vec![0.0; d];
    for (t, &id) in src.iter().enumerate().rev() {
        h = gru(&p.enc_bwd, &embed(&p.src_embed, id), &h);
        bwd[t] = h.clone();
    }
    fwd.into_iter()
        .zip(bwd)
        .map(|(mut f, b)| {
            f.extend(b);
            f
        })
        .collect()
}

pub fn attend(p: &ModelParams, s: &[f64], ctx: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let q = vecmat(s, &p.attn_w);
    let scores: Vec<f64> = ctx
        .iter()
        .map(|row| {
            let k = vecmat(row, &p.attn_u);
            (0..q.len())
                .map(|i| p.attn_v.data()[i] * (q[i] + k[i]).tanh())
                .sum()
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let alpha: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    let mut c = vec![0.0; ctx[0].len()];
    for (a, row) in alpha.iter().zip(ctx) {
        for (ci, ri) in c.iter_mut().zip(row) {
            *ci += a * ri;
        }
    }
    (c, alpha)
}

pub fn init_state(p: &ModelParams, ctx: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; ctx[0].len()];
    for row in ctx {
        for (m, r) in mean.iter_mut().zip(row) {
            *m += r / ctx.len() as f64;
        }
    }
    vecmat(&mean, &p.dec_init_w).into_iter().map(f64::tanh).collect()
}

/// One decoder step: returns the new state and next-token log-probabilities.
pub fn step(p: &ModelParams, y_prev: u32, s: &[f64], ctx: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let (c, _) = attend(p, s, ctx);
    let e = embed(&p.tgt_embed, y_prev);
    let mut x = e.clone();
    x.extend(&c);
    let s_new = gru(&p.dec, &x, s);
    let mut feat = s_new.clone();
    feat.extend(&c);
    feat.extend(&e);
    let logits: Vec<f64> = vecmat(&feat, &p.out_w)
        .iter()
        .zip(p.out_b.data())
        .map(|(a, b)| a + b)
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    (s_new, logits.iter().map(|l| l - z.ln()).collect())
}

/// Summed log-probability of `tgt` (which should end in EOS) under teacher forcing.
pub fn sequence_log_prob(p: &ModelParams, src: &[u32], tgt: &[u32]) -> f64 {
    let ctx = encode(p, src);
    let mut s = init_state(p, &ctx);
    let mut prev = BOS;
    let mut total = 0.0;
    for &y in tgt {
        let (s_new, lp) = step(p, prev, &s, &ctx);
        total += lp[y as usize];
        s = s_new;
        prev = y;
    }
    total
}

/// Every decode reachable within `max_len` emitted tokens: EOS-terminated sequences plus
/// the length-`max_len` sequences without EOS. Returns `(ids, log_prob)`.
pub fn enumerate_outputs(p: &ModelParams, src: &[u32], max_len: usize) -> Vec<(Vec<u32>, f64)> {
    let ctx = encode(p, src);
    let vocab = p.dims().tgt_vocab as u32;
    let mut out = Vec::new();
    let mut frontier = vec![(Vec::<u32>::new(), 0.0, init_state(p, &ctx))];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for (ids, lp, s) in &frontier {
            let prev = *ids.last().unwrap_or(&BOS);
            let (s_new, logp) = step(p, prev, s, &ctx);
            for tok in 0..vocab {
                if tok == PAD || tok == BOS {
                    continue;
                }
                let mut ext = ids.clone();
                ext.push(tok);
                let score = lp + logp[tok as usize];
                if tok == EOS || len == max_len {
                    out.push((ext, score));
                } else {
                    next.push((ext, score, s_new.clone()));
                }
            }
        }
        frontier = next;
    }
    out
}
