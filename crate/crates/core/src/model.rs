//! Attention encoder-decoder over characters.
//!
//! The encoder runs a forward and a backward GRU over the embedded source and concatenates
//! their states per position into the context set. Each decoder step first attends over the
//! context set with the previous decoder state, then advances the decoder GRU on the
//! previous target embedding and the attended context, and finally predicts the next
//! character from the new state, the context and the previous embedding.
//!
//! All graph builders are batched: `B` sequences run side by side as matrix rows, and
//! per-position quantities of the context set are stored as `[B·T × n]` matrices whose row
//! `b·T + t` belongs to sequence `b`, position `t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, PaddedIds, BOS};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Range of the uniform initializer for weight matrices.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
}

impl ModelDims {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            embed: 64,
            hidden: 128,
            attention: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.src_vocab, self.tgt_vocab, self.embed, self.hidden, self.attention];
        if all.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights<T> {
    pub w_z: T,
    pub w_r: T,
    pub w_h: T,
    pub u_z: T,
    pub u_r: T,
    pub u_h: T,
    pub b_z: T,
    pub b_r: T,
    pub b_h: T,
}

impl<T> GruWeights<T> {
    const NAMES: [&'static str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

    fn list(&self) -> [&T; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r,
            &self.b_h,
        ]
    }

    fn list_mut(&mut self) -> [&mut T; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            w_z: it.next()?,
            w_r: it.next()?,
            w_h: it.next()?,
            u_z: it.next()?,
            u_r: it.next()?,
            u_h: it.next()?,
            b_z: it.next()?,
            b_r: it.next()?,
            b_h: it.next()?,
        })
    }
}

impl GruWeights<Tensor> {
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = || Tensor::uniform(&[input, hidden], INIT_RANGE, rng);
        let (w_z, w_r, w_h) = (w(), w(), w());
        let mut u = || Tensor::uniform(&[hidden, hidden], INIT_RANGE, rng);
        let (u_z, u_r, u_h) = (u(), u(), u());
        Self {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    fn shapes(input: usize, hidden: usize) -> [Vec<usize>; 9] {
        let (w, u, b) = (vec![input, hidden], vec![hidden, hidden], vec![hidden]);
        [w.clone(), w.clone(), w, u.clone(), u.clone(), u, b.clone(), b.clone(), b]
    }
}

/// Every learned weight of the network, generic over storage so the same layout serves
/// tensors, tape handles and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub src_embed: T,
    pub tgt_embed: T,
    pub enc_fwd: GruWeights<T>,
    pub enc_bwd: GruWeights<T>,
    pub dec: GruWeights<T>,
    pub attn_w: T,
    pub attn_u: T,
    pub attn_v: T,
    pub dec_init_w: T,
    pub out_w: T,
    pub out_b: T,
}

pub type ModelParams = Weights<Tensor>;

impl<T> Weights<T> {
    /// Fixed traversal order used for optimizer state and checkpoints.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.src_embed, &self.tgt_embed];
        out.extend(self.enc_fwd.list());
        out.extend(self.enc_bwd.list());
        out.extend(self.dec.list());
        out.extend([
            &self.attn_w,
            &self.attn_u,
            &self.attn_v,
            &self.dec_init_w,
            &self.out_w,
            &self.out_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.src_embed, &mut self.tgt_embed];
        out.extend(self.enc_fwd.list_mut());
        out.extend(self.enc_bwd.list_mut());
        out.extend(self.dec.list_mut());
        out.extend([
            &mut self.attn_w,
            &mut self.attn_u,
            &mut self.attn_v,
            &mut self.dec_init_w,
            &mut self.out_w,
            &mut self.out_b,
        ]);
        out
    }

    pub fn names() -> Vec<String> {
        let mut out = vec!["src_embed".to_string(), "tgt_embed".to_string()];
        for prefix in ["enc_fwd", "enc_bwd", "dec"] {
            out.extend(GruWeights::<T>::NAMES.iter().map(|n| format!("{prefix}.{n}")));
        }
        out.extend(
            ["attn_w", "attn_u", "attn_v", "dec_init_w", "out_w", "out_b"]
                .iter()
                .map(|s| s.to_string()),
        );
        out
    }

    /// Inverse of [`Weights::tensors`]; `None` when the list has the wrong length.
    pub fn from_list(list: Vec<T>) -> Option<Self> {
        let mut it = list.into_iter();
        let w = Self {
            src_embed: it.next()?,
            tgt_embed: it.next()?,
            enc_fwd: GruWeights::from_iter(&mut it)?,
            enc_bwd: GruWeights::from_iter(&mut it)?,
            dec: GruWeights::from_iter(&mut it)?,
            attn_w: it.next()?,
            attn_u: it.next()?,
            attn_v: it.next()?,
            dec_init_w: it.next()?,
            out_w: it.next()?,
            out_b: it.next()?,
        };
        it.next().is_none().then_some(w)
    }
}

impl ModelParams {
    /// Uniform `±INIT_RANGE` matrices and zero biases, seeded.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelDims {
            src_vocab,
            tgt_vocab,
            embed: e,
            hidden: d,
            attention: a,
        } = dims;
        let u = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, INIT_RANGE, rng);
        Ok(Self {
            src_embed: u(&[src_vocab, e], &mut rng),
            tgt_embed: u(&[tgt_vocab, e], &mut rng),
            enc_fwd: GruWeights::init(e, d, &mut rng),
            enc_bwd: GruWeights::init(e, d, &mut rng),
            dec: GruWeights::init(e + 2 * d, d, &mut rng),
            attn_w: u(&[d, a], &mut rng),
            attn_u: u(&[2 * d, a], &mut rng),
            attn_v: u(&[a], &mut rng),
            dec_init_w: u(&[2 * d, d], &mut rng),
            out_w: u(&[d + 2 * d + e, tgt_vocab], &mut rng),
            out_b: Tensor::zeros(&[tgt_vocab]),
        })
    }

    /// Expected tensor shapes for `dims`, in [`Weights::tensors`] order.
    pub fn expected_shapes(dims: ModelDims) -> Vec<Vec<usize>> {
        let ModelDims {
            src_vocab,
            tgt_vocab,
            embed: e,
            hidden: d,
            attention: a,
        } = dims;
        let mut out = vec![vec![src_vocab, e], vec![tgt_vocab, e]];
        out.extend(GruWeights::shapes(e, d));
        out.extend(GruWeights::shapes(e, d));
        out.extend(GruWeights::shapes(e + 2 * d, d));
        out.extend([
            vec![d, a],
            vec![2 * d, a],
            vec![a],
            vec![2 * d, d],
            vec![d + 2 * d + e, tgt_vocab],
            vec![tgt_vocab],
        ]);
        out
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            src_vocab: self.src_embed.shape()[0],
            tgt_vocab: self.tgt_embed.shape()[0],
            embed: self.src_embed.shape()[1],
            hidden: self.enc_fwd.u_z.shape()[0],
            attention: self.attn_w.shape()[1],
        }
    }

    /// Checks that every tensor has the shape implied by [`ModelParams::dims`].
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        dims.validate()?;
        for ((name, t), shape) in Self::names()
            .iter()
            .zip(self.tensors())
            .zip(Self::expected_shapes(dims))
        {
            if t.shape() != shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a borrowed leaf on `tape`.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Weights<Var> {
        let vars = self.tensors().into_iter().map(|t| tape.param(t)).collect();
        Weights::from_list(vars).expect("same layout")
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Encoder output: per-position concatenated forward/backward states and their attention
/// projections.
#[derive(Debug, Clone)]
pub struct ContextSet {
    /// `[B·T × 2d]`; padded rows are zero.
    pub states: Var,
    /// `states · attn_u`, `[B·T × a]`, shared by every decoder step.
    pub keys: Var,
    /// `[B × T]` source mask.
    pub mask: Vec<f64>,
    pub batch: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    /// `[B × d]` hidden state.
    pub s: Var,
    /// `[B × 2d]` most recent context vector.
    pub c: Var,
}

/// One GRU update: `h = (1 − z)⊙h_prev + z⊙h̃`.
pub fn gru_step(tape: &mut Tape, w: &GruWeights<Var>, x: Var, h_prev: Var) -> Result<Var> {
    let gate = |tape: &mut Tape, wx: Var, uh: Var, b: Var, h: Var| -> Result<Var> {
        let xw = tape.matmul(x, wx)?;
        let hu = tape.matmul(h, uh)?;
        let sum = tape.add(xw, hu)?;
        tape.add_bias(sum, b)
    };
    let z = gate(tape, w.w_z, w.u_z, w.b_z, h_prev)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, w.w_r, w.u_r, w.b_r, h_prev)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h_prev)?;
    let cand = gate(tape, w.w_h, w.u_h, w.b_h, rh)?;
    let cand = tape.tanh(cand);

    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, h_prev)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}

pub fn encode(tape: &mut Tape, w: &Weights<Var>, src: &PaddedIds) -> Result<ContextSet> {
    let (batch, steps) = (src.rows, src.cols);
    if batch == 0 || steps == 0 || src.lengths.contains(&0) {
        return Err(Error::InvalidInput("empty source sequence".into()));
    }
    let d = tape.value(w.enc_fwd.u_z).shape()[0];

    let run = |tape: &mut Tape, gru: &GruWeights<Var>, order: &mut dyn Iterator<Item = usize>| {
        let mut h = tape.constant(Tensor::zeros(&[batch, d]));
        let mut out = vec![h; steps];
        for t in order {
            let x = tape.gather(w.src_embed, &src.column(t))?;
            let next = gru_step(tape, gru, x, h)?;
            h = tape.blend_rows(next, h, &src.mask_column(t))?;
            out[t] = h;
        }
        Ok::<_, Error>(out)
    };
    let fwd = run(tape, &w.enc_fwd, &mut (0..steps))?;
    let bwd = run(tape, &w.enc_bwd, &mut (0..steps).rev())?;

    let fwd = tape.interleave_steps(&fwd)?;
    let bwd = tape.interleave_steps(&bwd)?;
    let states = tape.concat_cols(&[fwd, bwd])?;
    let states = tape.scale_rows(states, &src.mask)?;
    let keys = tape.matmul(states, w.attn_u)?;
    Ok(ContextSet {
        states,
        keys,
        mask: src.mask.clone(),
        batch,
        steps,
    })
}

/// Additive attention of `s_prev` over the context set; returns `(context, weights)`.
pub fn attend(tape: &mut Tape, w: &Weights<Var>, s_prev: Var, ctx: &ContextSet) -> Result<(Var, Var)> {
    let query = tape.matmul(s_prev, w.attn_w)?;
    let hidden = tape.add_per_sequence(ctx.keys, query, ctx.steps)?;
    let hidden = tape.tanh(hidden);
    let a = tape.value(w.attn_v).numel();
    let v = tape.reshape(w.attn_v, &[a, 1])?;
    let scores = tape.matmul(hidden, v)?;
    let scores = tape.reshape(scores, &[ctx.batch, ctx.steps])?;
    let alpha = tape.masked_softmax_rows(scores, &ctx.mask)?;
    let c = tape.weighted_sum_steps(alpha, ctx.states)?;
    Ok((c, alpha))
}

/// `s₀ = tanh(mean(C)·dec_init_w)` over unmasked positions; the context starts at zero.
pub fn init_decoder(tape: &mut Tape, w: &Weights<Var>, ctx: &ContextSet) -> Result<DecoderState> {
    let mut weights = ctx.mask.clone();
    for row in weights.chunks_mut(ctx.steps) {
        let n: f64 = row.iter().sum();
        if n == 0.0 {
            return Err(Error::InvalidMask);
        }
        row.iter_mut().for_each(|m| *m /= n);
    }
    let weights = tape.constant(Tensor::matrix(ctx.batch, ctx.steps, weights)?);
    let mean = tape.weighted_sum_steps(weights, ctx.states)?;
    let s = tape.matmul(mean, w.dec_init_w)?;
    let s = tape.tanh(s);
    let width = tape.value(ctx.states).cols();
    let c = tape.constant(Tensor::zeros(&[ctx.batch, width]));
    Ok(DecoderState { s, c })
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub state: DecoderState,
    /// `[B × |V_tgt|]` log-probabilities of the next character.
    pub log_probs: Var,
    /// `[B × T]` attention weights used at this step.
    pub alpha: Var,
}

pub fn decoder_step(
    tape: &mut Tape,
    w: &Weights<Var>,
    y_prev: &[u32],
    state: DecoderState,
    ctx: &ContextSet,
) -> Result<StepOutput> {
    let (c, alpha) = attend(tape, w, state.s, ctx)?;
    let emb = tape.gather(w.tgt_embed, y_prev)?;
    let input = tape.concat_cols(&[emb, c])?;
    let s = gru_step(tape, &w.dec, input, state.s)?;
    let features = tape.concat_cols(&[s, c, emb])?;
    let logits = tape.matmul(features, w.out_w)?;
    let logits = tape.add_bias(logits, w.out_b)?;
    let log_probs = tape.log_softmax_rows(logits);
    Ok(StepOutput {
        state: DecoderState { s, c },
        log_probs,
        alpha,
    })
}

/// Teacher-forced mean negative log-likelihood per unmasked target token.
pub fn nll_graph(tape: &mut Tape, w: &Weights<Var>, batch: &Batch) -> Result<Var> {
    let ctx = encode(tape, w, &batch.src)?;
    let mut state = init_decoder(tape, w, &ctx)?;
    let tgt = &batch.tgt;
    let mut total: Option<Var> = None;
    for t in 0..tgt.cols {
        let y_prev = if t == 0 {
            vec![BOS; tgt.rows]
        } else {
            tgt.column(t - 1)
        };
        let out = decoder_step(tape, w, &y_prev, state, &ctx)?;
        state = out.state;
        let step = tape.pick_nll(out.log_probs, &tgt.column(t), &tgt.mask_column(t))?;
        total = Some(match total {
            None => step,
            Some(acc) => tape.add(acc, step)?,
        });
    }
    let tokens = batch.target_tokens();
    let total = total.ok_or_else(|| Error::InvalidInput("empty target batch".into()))?;
    Ok(tape.scale(total, 1.0 / tokens as f64))
}

pub fn sequence_nll(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let loss = nll_graph(&mut tape, &w, batch)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and its gradient for every parameter, in [`Weights::tensors`] order.
pub fn loss_and_gradients(params: &ModelParams, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let loss = nll_graph(&mut tape, &w, batch)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, w.tensors().into_iter().map(|&v| grads.get(v)).collect()))
}
