//! Stage-1 tagging heads and encoder transfer.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::LogMelSpectrogram;
use crate::encoder::{self, EncoderConfig, Encoded, FeatureBatch, PREFIX};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Audio tagging: multi-label events.
    At,
    /// Acoustic scene classification: one scene.
    Asc,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::At => "at",
            Task::Asc => "asc",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at" => Ok(Task::At),
            "asc" => Ok(Task::Asc),
            _ => Err(Error::arg(format!("unknown pretraining task {s:?} (expected at or asc)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelTarget {
    /// Multi-hot over the label set.
    Tags(Vec<bool>),
    Class(usize),
}

/// Temporal mean pooling followed by a linear map `d → E`.
#[derive(Clone, Debug, PartialEq)]
pub struct TagHead {
    pub task: Task,
    pub labels: Vec<String>,
}

impl TagHead {
    pub fn new(task: Task, labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::arg(format!("a {task} head needs at least 2 labels, got {}", labels.len())));
        }
        Ok(TagHead { task, labels })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn init_params<T: Scalar, R: Rng>(&self, embed_dim: usize, rng: &mut R) -> ParamStore<T> {
        let e = self.num_labels();
        let mut p = ParamStore::new();
        p.init_weight("head.w", &[e, embed_dim], embed_dim, e, rng);
        p.init_zeros("head.b", &[e]);
        p
    }

    fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Target for one record; `None` when the record lacks this task's labels
    /// or names a label outside the set.
    pub fn target(&self, events: Option<&[String]>, scene: Option<&str>) -> Option<LabelTarget> {
        match self.task {
            Task::At => {
                let events = events.filter(|e| !e.is_empty())?;
                let mut hot = vec![false; self.num_labels()];
                for e in events {
                    hot[self.label_index(e)?] = true;
                }
                Some(LabelTarget::Tags(hot))
            }
            Task::Asc => Some(LabelTarget::Class(self.label_index(scene?)?)),
        }
    }
}

/// Masked mean over the valid steps of each sequence: `[B, T*, d]` → `[B, d]`.
pub fn temporal_mean<T: Scalar>(g: &mut Graph<'_, T>, enc: &Encoded) -> Result<Var> {
    let (b, t) = {
        let s = g.tape.shape(enc.seq);
        (s[0], s[1])
    };
    let mut w = vec![T::zero(); b * t];
    for (i, &len) in enc.lengths.iter().enumerate() {
        let inv = T::one() / T::of(len as f64);
        w[i * t..i * t + len].iter_mut().for_each(|v| *v = inv);
    }
    let w = g.input(Tensor::new(vec![b, t, 1], w)?);
    let weighted = g.tape.mul(enc.seq, w)?;
    g.tape.sum_axis(weighted, 1)
}

/// Head logits `[B, E]` for an encoded batch.
pub fn head_logits<T: Scalar>(g: &mut Graph<'_, T>, enc: &Encoded) -> Result<Var> {
    let pooled = temporal_mean(g, enc)?;
    g.linear(pooled, "head")
}

/// BCE for AT, cross-entropy for ASC.
pub fn head_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, head: &TagHead, targets: &[LabelTarget]) -> Result<Var> {
    let e = head.num_labels();
    let b = g.tape.shape(logits)[0];
    if targets.len() != b {
        return Err(Error::dim(format!("{} targets for a batch of {b}", targets.len())));
    }
    match head.task {
        Task::At => {
            let mut y = Vec::with_capacity(b * e);
            for t in targets {
                match t {
                    LabelTarget::Tags(hot) if hot.len() == e => {
                        y.extend(hot.iter().map(|&h| if h { T::one() } else { T::zero() }))
                    }
                    LabelTarget::Tags(hot) => {
                        return Err(Error::dim(format!("multi-hot target of length {} for E={e}", hot.len())))
                    }
                    LabelTarget::Class(_) => return Err(Error::arg("class target given to an AT head")),
                }
            }
            let y = Tensor::new(vec![b, e], y)?;
            g.tape.binary_cross_entropy(logits, &y)
        }
        Task::Asc => {
            let mut y = Vec::with_capacity(b);
            for t in targets {
                match *t {
                    LabelTarget::Class(c) if c < e => y.push(Some(c)),
                    LabelTarget::Class(c) => return Err(Error::dim(format!("class {c} outside E={e}"))),
                    LabelTarget::Tags(_) => return Err(Error::arg("multi-hot target given to an ASC head")),
                }
            }
            g.tape.cross_entropy(logits, &y)
        }
    }
}

/// Eval-mode logits `[E]` for a single clip.
pub fn tag_forward<T: Scalar>(
    x: &LogMelSpectrogram<T>,
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    head: &TagHead,
) -> Result<Tensor<T>> {
    let w = params.require("head.w")?;
    if w.shape()[0] != head.num_labels() {
        return Err(Error::dim(format!(
            "head.w has {} rows for {} labels",
            w.shape()[0],
            head.num_labels()
        )));
    }
    let batch = FeatureBatch::new(&[x])?;
    let mut g = Graph::new(params, false);
    let enc = encoder::forward(&mut g, &batch, cfg)?;
    let logits = head_logits(&mut g, &enc)?;
    g.tape.value(logits).clone().reshape(vec![head.num_labels()])
}

/// Copies every `enc.` tensor of `src` after checking it against `dst_cfg`.
///
/// Heads and decoder tensors are never copied.
pub fn transfer_encoder<T: Scalar>(src: &ParamStore<T>, dst_cfg: &EncoderConfig) -> Result<ParamStore<T>> {
    let template: ParamStore<T> = dst_cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
    let mut out = ParamStore::new();
    for (name, want) in template.iter() {
        let have = src
            .get(name)
            .ok_or_else(|| Error::Transfer(format!("source checkpoint has no tensor {name:?}")))?;
        if have.shape() != want.shape() {
            return Err(Error::Transfer(format!(
                "tensor {name:?}: source shape {:?}, destination config expects {:?}",
                have.shape(),
                want.shape()
            )));
        }
        out.insert(name, have.clone());
    }
    if let Some(extra) = src.names().find(|n| n.starts_with(PREFIX) && !template.contains(n)) {
        return Err(Error::Transfer(format!(
            "source tensor {extra:?} has no counterpart in the destination encoder"
        )));
    }
    Ok(out)
}
