//! Beam-search inference.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{PaddedIds, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{decoder_step, encode, init_decoder, ContextSet, DecoderState, ModelParams};
use crate::numerics::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam_width: usize,
    /// Maximum emitted tokens; `None` means `3 × source length + 5`.
    pub max_len: Option<usize>,
    pub n_best: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_width: 10,
            max_len: None,
            n_best: 10,
        }
    }
}

impl DecodeOptions {
    pub fn with_beam(beam_width: usize) -> Self {
        Self {
            beam_width,
            max_len: None,
            n_best: beam_width,
        }
    }

    pub fn max_len_for(&self, src_len: usize) -> usize {
        self.max_len.unwrap_or(3 * src_len + 5)
    }

    fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.n_best == 0 || self.n_best > self.beam_width {
            return Err(Error::InvalidInput(format!(
                "need 1 ≤ n_best ≤ beam_width, got n_best={} beam_width={}",
                self.n_best, self.beam_width
            )));
        }
        if self.max_len == Some(0) {
            return Err(Error::InvalidInput("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// A complete decode. `ids` holds every emitted id, including the final EOS when the
/// hypothesis finished on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability per emitted token.
    pub fn normalized(&self) -> f64 {
        self.log_prob / self.ids.len() as f64
    }
}

/// Tokens a decoder may emit.
fn emittable(id: u32) -> bool {
    id != PAD && id != BOS
}

/// Encoder output for one source, detached from any tape.
struct Encoded {
    states: Tensor,
    keys: Tensor,
    steps: usize,
    s0: Vec<f64>,
    c0: Vec<f64>,
}

fn encode_source(params: &ModelParams, src_ids: &[u32]) -> Result<Encoded> {
    if src_ids.is_empty() {
        return Err(Error::InvalidInput("empty source".into()));
    }
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let ctx = encode(&mut tape, &w, &PaddedIds::new(&[src_ids.to_vec()]))?;
    let init = init_decoder(&mut tape, &w, &ctx)?;
    Ok(Encoded {
        states: tape.value(ctx.states).clone(),
        keys: tape.value(ctx.keys).clone(),
        steps: ctx.steps,
        s0: tape.value(init.s).data().to_vec(),
        c0: tape.value(init.c).data().to_vec(),
    })
}

/// Repeats each row block of `t` for `k` sequences.
fn replicate(t: &Tensor, k: usize) -> Tensor {
    let data = t.data().repeat(k);
    Tensor::matrix(t.rows() * k, t.cols(), data).expect("replicated shape")
}

struct Live {
    ids: Vec<u32>,
    log_prob: f64,
    s: Vec<f64>,
    c: Vec<f64>,
}

/// Advances `k` decoder states by one step; returns log-probabilities `[k × V]` and the new
/// hidden/context rows.
fn step_batch(
    params: &ModelParams,
    enc: &Encoded,
    live: &[Live],
) -> Result<(Tensor, Tensor, Tensor)> {
    let k = live.len();
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let states = tape.constant(replicate(&enc.states, k));
    let keys = tape.constant(replicate(&enc.keys, k));
    let ctx = ContextSet {
        states,
        keys,
        mask: vec![1.0; k * enc.steps],
        batch: k,
        steps: enc.steps,
    };
    let s: Vec<f64> = live.iter().flat_map(|h| h.s.iter().copied()).collect();
    let c: Vec<f64> = live.iter().flat_map(|h| h.c.iter().copied()).collect();
    let s = tape.constant(Tensor::matrix(k, live[0].s.len(), s)?);
    let c = tape.constant(Tensor::matrix(k, live[0].c.len(), c)?);
    let y_prev: Vec<u32> = live.iter().map(|h| *h.ids.last().unwrap_or(&BOS)).collect();
    let out = decoder_step(&mut tape, &w, &y_prev, DecoderState { s, c }, &ctx)?;
    Ok((
        tape.value(out.log_probs).clone(),
        tape.value(out.state.s).clone(),
        tape.value(out.state.c).clone(),
    ))
}

fn by_rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized()
        .total_cmp(&a.normalized())
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search from BOS over target ids.
///
/// Each step expands every live hypothesis by every emittable id and keeps the
/// `beam_width` best by total log-probability; those ending in EOS move to the finished
/// pool. Search stops once the pool holds `beam_width` entries or `max_len` tokens have been
/// emitted, in which case the surviving hypotheses are finished as they are. The pool is
/// ranked by length-normalized log-probability (ties by id sequence) and truncated to
/// `n_best`.
pub fn beam_search(
    params: &ModelParams,
    src_ids: &[u32],
    opts: &DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    opts.validate()?;
    let enc = encode_source(params, src_ids)?;
    let max_len = opts.max_len_for(src_ids.len());

    let mut live = vec![Live {
        ids: Vec::new(),
        log_prob: 0.0,
        s: enc.s0.clone(),
        c: enc.c0.clone(),
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let (log_probs, s_new, c_new) = step_batch(params, &enc, &live)?;
        let mut cands: Vec<(usize, u32, f64)> = Vec::with_capacity(live.len() * log_probs.cols());
        for (i, h) in live.iter().enumerate() {
            for (tok, &lp) in log_probs.row(i).iter().enumerate() {
                if emittable(tok as u32) {
                    cands.push((i, tok as u32, h.log_prob + lp));
                }
            }
        }
        // Stable: equal scores keep (parent, token) order.
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        cands.truncate(opts.beam_width);

        let mut next = Vec::with_capacity(cands.len());
        for (i, tok, score) in cands {
            let mut ids = live[i].ids.clone();
            ids.push(tok);
            if tok == EOS {
                pool.push(Hypothesis {
                    ids,
                    log_prob: score,
                    finished: true,
                });
            } else {
                next.push(Live {
                    ids,
                    log_prob: score,
                    s: s_new.row(i).to_vec(),
                    c: c_new.row(i).to_vec(),
                });
            }
        }
        live = next;
        if pool.len() >= opts.beam_width || live.is_empty() {
            live.clear();
            break;
        }
    }
    pool.extend(live.into_iter().map(|h| Hypothesis {
        ids: h.ids,
        log_prob: h.log_prob,
        finished: false,
    }));

    pool.sort_by(by_rank);
    pool.truncate(opts.n_best);
    Ok(pool)
}

/// Step-wise argmax decoding; the lowest id wins ties.
pub fn greedy_search(params: &ModelParams, src_ids: &[u32], max_len: usize) -> Result<Hypothesis> {
    if src_ids.is_empty() {
        return Err(Error::InvalidInput("empty source".into()));
    }
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let ctx = encode(&mut tape, &w, &PaddedIds::new(&[src_ids.to_vec()]))?;
    let mut state = init_decoder(&mut tape, &w, &ctx)?;
    let mut ids = Vec::new();
    let mut log_prob = 0.0;
    let mut prev = BOS;
    for _ in 0..max_len {
        let out = decoder_step(&mut tape, &w, &[prev], state, &ctx)?;
        state = out.state;
        let row = tape.value(out.log_probs).row(0);
        let mut best: Option<(u32, f64)> = None;
        for (tok, &lp) in row.iter().enumerate() {
            if emittable(tok as u32) && best.map_or(true, |(_, b)| lp > b) {
                best = Some((tok as u32, lp));
            }
        }
        let (tok, lp) = best.expect("vocabulary has emittable ids");
        log_prob += lp;
        ids.push(tok);
        if tok == EOS {
            return Ok(Hypothesis {
                ids,
                log_prob,
                finished: true,
            });
        }
        prev = tok;
    }
    Ok(Hypothesis {
        ids,
        log_prob,
        finished: false,
    })
}

/// A decoded transliteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    pub log_prob: f64,
    pub normalized: f64,
}

/// Beam-decodes `source` and renders the n-best list as strings. Unknown source characters
/// map to UNK; an UNK in the output is rendered as the replacement glyph.
pub fn transliterate(ckpt: &Checkpoint, source: &str, opts: &DecodeOptions) -> Result<Vec<Candidate>> {
    if source.is_empty() {
        return Err(Error::InvalidInput("empty input string".into()));
    }
    let src_ids = ckpt.src_vocab.encode(source, false);
    let hyps = beam_search(&ckpt.params, &src_ids, opts)?;
    let mut out = hyps
        .into_iter()
        .map(|h| {
            Ok(Candidate {
                text: ckpt.tgt_vocab.decode(&h.ids)?,
                log_prob: h.log_prob,
                normalized: h.normalized(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        b.normalized
            .total_cmp(&a.normalized)
            .then_with(|| a.text.cmp(&b.text))
    });
    Ok(out)
}

/// Transliterates every source in parallel; results keep input order.
pub fn transliterate_all(
    ckpt: &Checkpoint,
    sources: &[String],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<Candidate>>> {
    sources
        .par_iter()
        .map(|s| transliterate(ckpt, s, opts))
        .collect()
}

/// N-best rows: `source<TAB>rank<TAB>candidate<TAB>logprob<TAB>normalized_logprob`.
pub fn format_nbest(source: &str, candidates: &[Candidate]) -> String {
    let mut out = String::new();
    for (rank, c) in candidates.iter().enumerate() {
        let _ = writeln!(
            out,
            "{source}\t{}\t{}\t{}\t{}",
            rank + 1,
            c.text,
            c.log_prob,
            c.normalized
        );
    }
    out
}
