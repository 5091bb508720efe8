use std::cmp::Ordering;

use super::{decode_step, initial_state, DecoderVars, Memory, BOS, EOS};
use crate::encoder::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionHypothesis<T> {
    /// Starts with `bos`.
    pub tokens: Vec<usize>,
    /// Sum of the chosen tokens' log-softmax values.
    pub log_prob: T,
    pub finished: bool,
}

impl<T> CaptionHypothesis<T> {
    /// Tokens after `bos`.
    pub fn generated(&self) -> &[usize] {
        &self.tokens[1..]
    }
}

/// Eval-mode decoder bound to one clip's memory.
struct Session<'a, T: Scalar> {
    g: Graph<'a, T>,
    vars: DecoderVars,
    mem: Memory,
}

impl<'a, T: Scalar> Session<'a, T> {
    fn new(e: &EmbeddingSequence<T>, params: &'a ParamStore<T>) -> Result<Self> {
        if e.is_empty() {
            return Err(Error::Contract("cannot decode from an empty embedding sequence".into()));
        }
        let mut g = Graph::new(params, false);
        let vars = DecoderVars::load(&mut g)?;
        let (t, d) = (e.len(), e.dim());
        let seq = g.input(e.values.clone().reshape(vec![1, t, d])?);
        let mem = Memory::new(&mut g.tape, &vars, seq, &[t])?;
        Ok(Session { g, vars, mem })
    }

    fn initial(&mut self) -> Var {
        initial_state(&mut self.g.tape, &self.vars, 1)
    }

    /// Next state and log-probabilities of every token after `token`.
    fn step(&mut self, token: usize, h: Var) -> Result<(Var, Vec<T>)> {
        let s = decode_step(&mut self.g.tape, &self.vars, &self.mem, &[token], h)?;
        let z = self.g.tape.value(s.logits).data();
        let lse = log_sum_exp(z.iter().copied());
        Ok((s.h, z.iter().map(|&v| v - lse).collect()))
    }
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::arg("max_len must be at least 1"));
    }
    Ok(())
}

/// Highest-probability token at every step, lowest id on ties.
pub fn greedy_decode<T: Scalar>(
    e: &EmbeddingSequence<T>,
    params: &ParamStore<T>,
    max_len: usize,
) -> Result<CaptionHypothesis<T>> {
    check_max_len(max_len)?;
    let mut s = Session::new(e, params)?;
    let mut h = s.initial();
    let mut hyp = CaptionHypothesis {
        tokens: vec![BOS],
        log_prob: T::zero(),
        finished: false,
    };
    for _ in 0..max_len {
        let last = *hyp.tokens.last().expect("starts with bos");
        let (next, lp) = s.step(last, h)?;
        h = next;
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        hyp.tokens.push(best);
        hyp.log_prob += lp[best];
        if best == EOS {
            break;
        }
    }
    hyp.finished = true;
    Ok(hyp)
}

/// Higher score first, then the lexicographically smaller token sequence.
fn rank<T: Scalar>(a_score: T, a: &[usize], b_score: T, b: &[usize]) -> Ordering {
    b_score.as_f64().total_cmp(&a_score.as_f64()).then_with(|| a.cmp(b))
}

/// Beam search over raw summed log-probabilities.
///
/// Hypotheses ending in `eos` leave the beam and are kept; whatever is still
/// active after `max_len` steps is finished by length.
pub fn beam_search<T: Scalar>(
    e: &EmbeddingSequence<T>,
    params: &ParamStore<T>,
    beam: usize,
    max_len: usize,
) -> Result<CaptionHypothesis<T>> {
    if beam == 0 {
        return Err(Error::arg("beam width must be at least 1"));
    }
    check_max_len(max_len)?;
    let mut s = Session::new(e, params)?;
    let h0 = s.initial();
    let mut active: Vec<(CaptionHypothesis<T>, Var)> = vec![(
        CaptionHypothesis {
            tokens: vec![BOS],
            log_prob: T::zero(),
            finished: false,
        },
        h0,
    )];
    let mut finished: Vec<CaptionHypothesis<T>> = Vec::new();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        // (score, parent, token, state)
        let mut cands: Vec<(T, usize, usize, Var)> = Vec::new();
        for (pi, (hyp, h)) in active.iter().enumerate() {
            let last = *hyp.tokens.last().expect("starts with bos");
            let (next, lp) = s.step(last, *h)?;
            cands.extend(lp.iter().enumerate().map(|(tok, &l)| (hyp.log_prob + l, pi, tok, next)));
        }
        // active hypotheses share a length, so parent order then token order is lexicographic
        cands.sort_by(|a, b| {
            b.0.as_f64()
                .total_cmp(&a.0.as_f64())
                .then_with(|| active[a.1].0.tokens.cmp(&active[b.1].0.tokens))
                .then_with(|| a.2.cmp(&b.2))
        });
        cands.truncate(beam);
        let mut next_active = Vec::with_capacity(beam);
        for (score, pi, tok, h) in cands {
            let mut tokens = active[pi].0.tokens.clone();
            tokens.push(tok);
            let hyp = CaptionHypothesis {
                tokens,
                log_prob: score,
                finished: tok == EOS,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next_active.push((hyp, h));
            }
        }
        active = next_active;
    }
    finished.extend(active.into_iter().map(|(mut hyp, _)| {
        hyp.finished = true;
        hyp
    }));
    finished
        .into_iter()
        .min_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens))
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}
