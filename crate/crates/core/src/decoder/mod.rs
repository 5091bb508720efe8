//! Attentional GRU caption decoder.
//!
//! At step `n` the previous state `h_{n-1}` is scored against every encoder
//! step with `vᵀ tanh(W [h; e_t])`, the softmax of those scores weights the
//! context `c_n`, and the GRU consumes `[c_n; WE(w_{n-1})]`.

mod search;
mod vocab;

pub use search::{beam_search, greedy_decode, CaptionHypothesis};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

use rand::Rng;

use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::numerics::{gru_cell, nn, Graph, GruVars, ParamStore, Scalar, Tape, Tensor, Var};

pub const PREFIX: &str = "dec.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    /// Width of the encoder embeddings being attended over.
    pub context_dim: usize,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
}

impl DecoderConfig {
    pub fn new(vocab_size: usize, context_dim: usize) -> Self {
        DecoderConfig {
            vocab_size,
            context_dim,
            word_dim: 64,
            hidden_dim: 128,
            attention_dim: 128,
        }
    }

    /// Reads the dimensions back from a parameter set.
    pub fn from_params<T: Scalar>(p: &ParamStore<T>) -> Result<Self> {
        let embed = p.require("dec.embed.w")?.shape().to_vec();
        let att = p.require("dec.att.w")?.shape().to_vec();
        let hidden = p.require("dec.gru.u_r")?.shape()[0];
        if embed.len() != 2 || att.len() != 2 || att[1] <= hidden {
            return Err(Error::Contract("inconsistent decoder tensor shapes".into()));
        }
        Ok(DecoderConfig {
            vocab_size: embed[0],
            context_dim: att[1] - hidden,
            word_dim: embed[1],
            hidden_dim: hidden,
            attention_dim: att[0],
        })
    }

    pub fn init_params<T: Scalar, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let (v, d, dw, dh, da) = (
            self.vocab_size,
            self.context_dim,
            self.word_dim,
            self.hidden_dim,
            self.attention_dim,
        );
        let mut p = ParamStore::new();
        p.init_weight("dec.embed.w", &[v, dw], v, dw, rng);
        nn::init_gru(&mut p, "dec.gru", d + dw, dh, rng);
        p.init_weight("dec.att.w", &[da, dh + d], dh + d, da, rng);
        p.init_weight("dec.att.v", &[da], da, 1, rng);
        p.init_weight("dec.out.w", &[v, dh], dh, v, rng);
        p.init_zeros("dec.out.b", &[v]);
        p
    }
}

/// Decoder parameters placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub embed: Var,
    pub gru: GruVars,
    pub att_w: Var,
    pub att_v: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl DecoderVars {
    /// Canonical order used by [`DecoderVars::from_slice`].
    pub const NAMES: [&'static str; 14] = [
        "dec.embed.w",
        "dec.gru.w_r",
        "dec.gru.w_z",
        "dec.gru.w_n",
        "dec.gru.u_r",
        "dec.gru.u_z",
        "dec.gru.u_n",
        "dec.gru.b_r",
        "dec.gru.b_z",
        "dec.gru.b_n",
        "dec.att.w",
        "dec.att.v",
        "dec.out.w",
        "dec.out.b",
    ];

    pub fn load<T: Scalar>(g: &mut Graph<'_, T>) -> Result<Self> {
        let vars = Self::NAMES.iter().map(|n| g.param(n)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_slice(&vars))
    }

    /// `vars` in [`DecoderVars::NAMES`] order.
    pub fn from_slice(vars: &[Var]) -> Self {
        assert_eq!(vars.len(), Self::NAMES.len(), "decoder needs {} tensors", Self::NAMES.len());
        DecoderVars {
            embed: vars[0],
            gru: GruVars {
                w_r: vars[1],
                w_z: vars[2],
                w_n: vars[3],
                u_r: vars[4],
                u_z: vars[5],
                u_n: vars[6],
                b_r: vars[7],
                b_z: vars[8],
                b_n: vars[9],
            },
            att_w: vars[10],
            att_v: vars[11],
            out_w: vars[12],
            out_b: vars[13],
        }
    }
}

/// Encoder memory with its attention projection computed once.
#[derive(Clone, Debug)]
pub struct Memory {
    /// `[B, T*, d]`.
    pub seq: Var,
    /// `W_e · e_t` for every step, `[B, T*, d_a]`.
    keys: Var,
    /// The `h` columns of the score matrix, `[d_a, d_h]`.
    w_h: Var,
    pub lengths: Vec<usize>,
}

impl Memory {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, vars: &DecoderVars, seq: Var, lengths: &[usize]) -> Result<Self> {
        let s = tape.shape(seq).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("memory must be [B, T*, d], got {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if t == 0 || lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::Contract(format!(
                "attention over an empty or inconsistent memory (T*={t}, lengths {lengths:?})"
            )));
        }
        let (da, width) = {
            let w = tape.shape(vars.att_w);
            (w[0], w[1])
        };
        if width <= d {
            return Err(Error::dim(format!("attention matrix width {width} cannot hold context width {d}")));
        }
        let dh = width - d;
        let w_h = tape.slice(vars.att_w, 1, 0, dh)?;
        let w_e = tape.slice(vars.att_w, 1, dh, d)?;
        let flat = tape.reshape(seq, &[b * t, d])?;
        let keys = tape.linear(flat, w_e, None)?;
        let keys = tape.reshape(keys, &[b, t, da])?;
        Ok(Memory {
            seq,
            keys,
            w_h,
            lengths: lengths.to_vec(),
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Repeats memory rows so that row `i` of the result is row `rows[i]`.
    pub fn gather<T: Scalar>(tape: &mut Tape<T>, enc: &Encoded, rows: &[usize]) -> Result<Encoded> {
        let s = tape.shape(enc.seq).to_vec();
        let flat = tape.reshape(enc.seq, &[s[0], s[1] * s[2]])?;
        let picked = tape.embedding(flat, rows)?;
        Ok(Encoded {
            seq: tape.reshape(picked, &[rows.len(), s[1], s[2]])?,
            lengths: rows.iter().map(|&r| enc.lengths[r]).collect(),
        })
    }
}

/// `(α [B, T*], c [B, d])` for previous states `h_prev [B, d_h]`.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, vars: &DecoderVars, mem: &Memory, h_prev: Var) -> Result<(Var, Var)> {
    let (b, t, da) = {
        let s = tape.shape(mem.keys);
        (s[0], s[1], s[2])
    };
    let q = tape.linear(h_prev, mem.w_h, None)?;
    let q = tape.reshape(q, &[b, 1, da])?;
    let pre = tape.add(mem.keys, q)?;
    let act = tape.tanh(pre);
    let weighted = tape.mul(act, vars.att_v)?;
    let scores = tape.sum_axis(weighted, 2)?;
    let alpha = tape.masked_softmax(scores, &mem.lengths)?;
    let a3 = tape.reshape(alpha, &[b, t, 1])?;
    let terms = tape.mul(a3, mem.seq)?;
    let c = tape.sum_axis(terms, 1)?;
    Ok((alpha, c))
}

#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub h: Var,
    /// `[B, V]`.
    pub logits: Var,
    pub alpha: Var,
}

/// One decoder step for every row: attend, embed the previous token, update the GRU, project.
pub fn decode_step<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &DecoderVars,
    mem: &Memory,
    tokens: &[usize],
    h_prev: Var,
) -> Result<Step> {
    if tokens.len() != mem.batch() {
        return Err(Error::dim(format!("{} tokens for a memory batch of {}", tokens.len(), mem.batch())));
    }
    let (alpha, c) = attend(tape, vars, mem, h_prev)?;
    let w = tape.embedding(vars.embed, tokens)?;
    let x = tape.concat(&[c, w], 1)?;
    let h = gru_cell(tape, x, h_prev, &vars.gru)?;
    let logits = tape.linear(h, vars.out_w, Some(vars.out_b))?;
    Ok(Step { h, logits, alpha })
}

/// Zero initial state `[B, d_h]`.
pub fn initial_state<T: Scalar>(tape: &mut Tape<T>, vars: &DecoderVars, batch: usize) -> Var {
    let dh = tape.shape(vars.gru.u_r)[0];
    tape.constant(Tensor::zeros(&[batch, dh]))
}

/// Mean cross-entropy over every non-pad target token of the batch.
///
/// Row `i` of `captions` is `[bos, t₁ … t_L, eos]` decoded against memory row `i`;
/// shorter rows are padded and their padded steps are excluded.
pub fn teacher_forced_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &DecoderVars,
    mem: &Memory,
    captions: &[Vec<usize>],
) -> Result<Var> {
    if captions.len() != mem.batch() {
        return Err(Error::dim(format!("{} captions for a memory batch of {}", captions.len(), mem.batch())));
    }
    if let Some(bad) = captions.iter().position(|c| c.len() < 2) {
        return Err(Error::Contract(format!("caption {bad} has no target token")));
    }
    let steps = captions.iter().map(|c| c.len() - 1).max().unwrap_or(0);
    let mut h = initial_state(tape, vars, captions.len());
    let mut logits = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps * captions.len());
    for n in 0..steps {
        let inputs: Vec<usize> = captions.iter().map(|c| c.get(n).copied().unwrap_or(PAD)).collect();
        let step = decode_step(tape, vars, mem, &inputs, h)?;
        h = step.h;
        logits.push(step.logits);
        targets.extend(captions.iter().map(|c| if n + 1 < c.len() { Some(c[n + 1]) } else { None }));
    }
    let all = tape.concat(&logits, 0)?;
    tape.cross_entropy(all, &targets)
}
