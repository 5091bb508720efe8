//! Log-mel → embedding-sequence encoders.
//!
//! Two desk-scale variants: `cnn_mini` (a time-invariant stack of conv blocks)
//! and `crnn_mini` (fewer conv blocks followed by a bidirectional GRU). Both
//! pool time by a fixed factor `s`, so `T* = ⌈T / s⌉`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dsp::LogMelSpectrogram;
use crate::error::{Error, Result};
use crate::numerics::{gru_cell, nn, Graph, ParamStore, Scalar, Tensor, Var};

/// All encoder tensors live under this prefix; it delimits what transfers.
pub const PREFIX: &str = "enc.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    CnnMini,
    CrnnMini,
}

impl Variant {
    fn blocks(self) -> usize {
        match self {
            Variant::CnnMini => 4,
            Variant::CrnnMini => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::CnnMini => "cnn_mini",
            Variant::CrnnMini => "crnn_mini",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn_mini" | "cnn" => Ok(Variant::CnnMini),
            "crnn_mini" | "crnn" => Ok(Variant::CrnnMini),
            _ => Err(Error::arg(format!("unknown encoder variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub channels: Vec<usize>,
    pub time_subsample: usize,
    pub embed_dim: usize,
    /// Per direction, CRNN only.
    pub recurrent_hidden: usize,
    pub n_mels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: Variant::CnnMini,
            channels: vec![16, 32, 64, 128],
            time_subsample: 4,
            embed_dim: 128,
            recurrent_hidden: 64,
            n_mels: 64,
        }
    }
}

impl EncoderConfig {
    pub fn crnn() -> Self {
        EncoderConfig {
            variant: Variant::CrnnMini,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.variant.blocks();
        if self.channels.len() < blocks || self.channels.iter().take(blocks).any(|&c| c == 0) {
            return Err(Error::arg(format!(
                "{} needs {blocks} positive channel counts, got {:?}",
                self.variant, self.channels
            )));
        }
        if self.time_subsample == 0 || self.embed_dim == 0 || self.n_mels == 0 {
            return Err(Error::arg("time_subsample, embed_dim and n_mels must be positive"));
        }
        if self.variant == Variant::CrnnMini && self.recurrent_hidden == 0 {
            return Err(Error::arg("recurrent_hidden must be positive"));
        }
        Ok(())
    }

    /// `(time, freq)` pooling per block. Time factors multiply to `time_subsample`.
    pub fn pools(&self) -> Vec<(usize, usize)> {
        let blocks = self.variant.blocks();
        let mut time = vec![1usize; blocks];
        let s = self.time_subsample;
        if s.is_power_of_two() {
            let mut rem = s;
            let mut i = 0;
            while rem > 1 {
                time[i % blocks] *= 2;
                rem /= 2;
                i += 1;
            }
        } else {
            time[0] = s;
        }
        // cnn_mini: blocks 3-4 pool frequency only
        time.into_iter().map(|t| (t, 2)).collect()
    }

    /// `T* = ⌈T / s⌉`.
    pub fn output_len(&self, frames: usize) -> usize {
        self.pools().iter().fold(frames, |t, &(pt, _)| t.div_ceil(pt))
    }

    fn block_channels(&self) -> &[usize] {
        &self.channels[..self.variant.blocks()]
    }

    fn trunk_width(&self) -> usize {
        *self.block_channels().last().expect("validated")
    }

    /// Fresh parameters: Glorot weights, zero biases, unit batchnorm scale.
    pub fn init_params<T: Scalar, R: Rng>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut p = ParamStore::new();
        let mut c_in = 1;
        for (b, &c) in self.block_channels().iter().enumerate() {
            for j in 1..=2 {
                let pre = format!("enc.block{}.", b + 1);
                let cin = if j == 1 { c_in } else { c };
                p.init_weight(&format!("{pre}conv{j}.w"), &[c, cin, 3, 3], cin * 9, c * 9, rng);
                p.init_ones(&format!("{pre}bn{j}.gamma"), &[c]);
                p.init_zeros(&format!("{pre}bn{j}.beta"), &[c]);
                p.init_zeros(&format!("{pre}bn{j}.running_mean"), &[c]);
                p.init_ones(&format!("{pre}bn{j}.running_var"), &[c]);
            }
            c_in = c;
        }
        let proj_in = match self.variant {
            Variant::CnnMini => self.trunk_width(),
            Variant::CrnnMini => {
                let h = self.recurrent_hidden;
                nn::init_gru(&mut p, "enc.gru_fwd", self.trunk_width(), h, rng);
                nn::init_gru(&mut p, "enc.gru_bwd", self.trunk_width(), h, rng);
                2 * h
            }
        };
        p.init_weight("enc.proj.w", &[self.embed_dim, proj_in], proj_in, self.embed_dim, rng);
        p.init_zeros("enc.proj.b", &[self.embed_dim]);
        Ok(p)
    }
}

/// Zero-padded batch of spectrograms with their true frame counts.
#[derive(Clone, Debug)]
pub struct FeatureBatch<T> {
    /// `[B, T_max, D]`.
    pub values: Tensor<T>,
    pub frames: Vec<usize>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(clips: &[&LogMelSpectrogram<T>]) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::arg("empty feature batch"))?;
        let d = first.bands();
        if let Some(bad) = clips.iter().find(|c| c.bands() != d) {
            return Err(Error::dim(format!("mixed band counts {d} and {}", bad.bands())));
        }
        let t_max = clips.iter().map(|c| c.frames()).max().unwrap_or(0);
        let mut data = vec![T::zero(); clips.len() * t_max * d];
        for (b, c) in clips.iter().enumerate() {
            let n = c.frames() * d;
            data[b * t_max * d..b * t_max * d + n].copy_from_slice(c.values.data());
        }
        Ok(FeatureBatch {
            values: Tensor::new(vec![clips.len(), t_max, d], data)?,
            frames: clips.iter().map(|c| c.frames()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Encoder output on a tape: `[B, T*, d]` plus valid lengths per item.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub seq: Var,
    pub lengths: Vec<usize>,
}

/// Encoder output for one clip, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence<T> {
    /// `[T*, d]`.
    pub values: Tensor<T>,
    pub source_frames: usize,
}

impl<T: Scalar> EmbeddingSequence<T> {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn step(&self, t: usize) -> &[T] {
        let d = self.dim();
        &self.values.data()[t * d..(t + 1) * d]
    }
}

/// Runs the encoder on a batch. Batchnorm follows the graph's train/eval mode.
pub fn forward<T: Scalar>(g: &mut Graph<'_, T>, batch: &FeatureBatch<T>, cfg: &EncoderConfig) -> Result<Encoded> {
    cfg.validate()?;
    let shape = batch.values.shape().to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if d != cfg.n_mels {
        return Err(Error::dim(format!("encoder expects {} mel bands, got {d}", cfg.n_mels)));
    }
    let x = g.input(batch.values.clone());
    let mut h = g.tape.reshape(x, &[b, 1, t, d])?;
    for (i, &(pt, pf)) in cfg.pools().iter().enumerate() {
        for j in 1..=2 {
            let w = g.param(&format!("enc.block{}.conv{j}.w", i + 1))?;
            h = g.tape.conv2d(h, w)?;
            h = g.batchnorm(h, &format!("enc.block{}.bn{j}", i + 1))?;
            h = g.tape.relu(h);
        }
        h = g.tape.avgpool2d(h, pt, pf)?;
    }
    // [B, C, T*, F'] -> mean over frequency -> [B, T*, C]
    let h = g.tape.mean_axis(h, 3)?;
    let h = g.tape.permute(h, &[0, 2, 1])?;
    let t_out = g.tape.shape(h)[1];
    let lengths: Vec<usize> = batch.frames.iter().map(|&f| cfg.output_len(f)).collect();
    let feats = match cfg.variant {
        Variant::CnnMini => h,
        Variant::CrnnMini => bidirectional_gru(g, h, &lengths, cfg.recurrent_hidden)?,
    };
    let width = g.tape.shape(feats)[2];
    let flat = g.tape.reshape(feats, &[b * t_out, width])?;
    let proj = g.linear(flat, "enc.proj")?;
    let seq = g.tape.reshape(proj, &[b, t_out, cfg.embed_dim])?;
    Ok(Encoded { seq, lengths })
}

/// `[B, T, C]` → `[B, T, 2H]`; padded steps leave the recurrent state untouched.
fn bidirectional_gru<T: Scalar>(g: &mut Graph<'_, T>, x: Var, lengths: &[usize], hidden: usize) -> Result<Var> {
    let (b, t, c) = {
        let s = g.tape.shape(x);
        (s[0], s[1], s[2])
    };
    let ragged = lengths.iter().any(|&l| l < t);
    let mut directions = Vec::with_capacity(2);
    for (prefix, reverse) in [("enc.gru_fwd", false), ("enc.gru_bwd", true)] {
        let p = g.gru_vars(prefix)?;
        let mut h = g.input(Tensor::zeros(&[b, hidden]));
        let mut outs = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let xs = g.tape.slice(x, 1, step, 1)?;
            let xs = g.tape.reshape(xs, &[b, c])?;
            let next = gru_cell(&mut g.tape, xs, h, &p)?;
            h = if ragged {
                let keep: Vec<T> = lengths.iter().map(|&l| if step < l { T::one() } else { T::zero() }).collect();
                let m = g.input(Tensor::new(vec![b, 1], keep)?);
                let delta = g.tape.sub(next, h)?;
                let gated = g.tape.mul(m, delta)?;
                g.tape.add(h, gated)?
            } else {
                next
            };
            outs[step] = Some(g.tape.reshape(h, &[b, 1, hidden])?);
        }
        let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        directions.push(g.tape.concat(&outs, 1)?);
    }
    g.tape.concat(&directions, 2)
}

/// Eval-mode encoding of a single spectrogram.
pub fn encode<T: Scalar>(
    x: &LogMelSpectrogram<T>,
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
) -> Result<EmbeddingSequence<T>> {
    let batch = FeatureBatch::new(&[x])?;
    let mut g = Graph::new(params, false);
    let enc = forward(&mut g, &batch, cfg)?;
    let v = g.tape.value(enc.seq).clone();
    let (t, d) = (v.shape()[1], v.shape()[2]);
    Ok(EmbeddingSequence {
        values: v.reshape(vec![t, d])?,
        source_frames: x.frames(),
    })
}
