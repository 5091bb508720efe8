//! Stage-1 tagging and stage-2 captioning loops with early stopping.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{TrainConfig, TrainTask};
use super::data::{split_indices, Clip};
use crate::decoder::{beam_search, teacher_forced_loss, DecoderConfig, DecoderVars, Memory, Vocabulary};
use crate::encoder::{self, EncoderConfig, FeatureBatch};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::numerics::{update_running_stats, AdamConfig, AdamState, Graph, ParamStore, Var};
use crate::pretrain::{head_logits, head_loss, transfer_encoder, LabelTarget, Task, TagHead};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    /// Validation loss of the untrained model.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Lowest validation loss, earliest epoch on ties.
    pub fn best(&self) -> Option<EpochLog> {
        self.epochs
            .iter()
            .copied()
            .fold(None, |acc: Option<EpochLog>, e| match acc {
                Some(a) if a.val_loss <= e.val_loss || e.val_loss.is_nan() => Some(a),
                _ if e.val_loss.is_nan() => acc,
                _ => Some(e),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

struct Fitted {
    params: ParamStore<f64>,
    best_epoch: usize,
    val_loss: f64,
    log: TrainLog,
}

/// Weighted mean loss over `idx` in eval mode.
fn evaluate<F>(params: &ParamStore<f64>, idx: &[usize], batch_size: usize, loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[usize]) -> Result<(Var, f64)>,
{
    let (mut total, mut weight) = (0.0, 0.0);
    for chunk in idx.chunks(batch_size) {
        let mut g = Graph::new(params, false);
        let (l, w) = loss(&mut g, chunk)?;
        total += g.tape.value(l).data()[0] * w;
        weight += w;
    }
    Ok(total / weight)
}

/// Adam over mini-batches of `batch_size` samples; keeps the parameters of
/// the epoch with the lowest validation loss and stops once `patience`
/// epochs pass without improvement.
///
/// Each epoch shuffles the training groups and concatenates them, so the
/// samples of one group land in the same or adjacent batches.
fn fit<F>(
    mut params: ParamStore<f64>,
    train: &[Vec<usize>],
    val: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    loss: F,
) -> Result<Fitted>
where
    F: Fn(&mut Graph<'_, f64>, &[usize]) -> Result<(Var, f64)>,
{
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut log = TrainLog {
        initial_val_loss: evaluate(&params, val, cfg.batch_size, &loss)?,
        epochs: Vec::new(),
    };
    let mut best: Option<(usize, f64, ParamStore<f64>)> = None;
    let mut stale = 0;
    let mut groups = train.to_vec();
    for epoch in 1..=cfg.max_epochs {
        groups.shuffle(rng);
        let order: Vec<usize> = groups.iter().flatten().copied().collect();
        let (mut total, mut weight) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let (grads, stats) = {
                let mut g = Graph::new(&params, true);
                let (l, w) = loss(&mut g, chunk)?;
                total += g.tape.value(l).data()[0] * w;
                weight += w;
                (g.backward(l)?, g.batch_stats().to_vec())
            };
            adam.step(&mut params, &grads)?;
            update_running_stats(&mut params, &stats, cfg.bn_momentum)?;
        }
        let val_loss = evaluate(&params, val, cfg.batch_size, &loss)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: total / weight,
            val_loss,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, params.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    let (best_epoch, val_loss, params) =
        best.ok_or_else(|| Error::Contract("validation loss was never finite".into()))?;
    if val_loss.is_nan() {
        return Err(Error::Contract("validation loss is NaN".into()));
    }
    Ok(Fitted {
        params,
        best_epoch,
        val_loss,
        log,
    })
}

fn batch_features<'c>(clips: &'c [Clip], idx: &[usize]) -> Result<FeatureBatch<f64>> {
    let x: Vec<&'c _> = idx.iter().map(|&i| &clips[i].features).collect();
    FeatureBatch::new(&x)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub head: TagHead,
    pub log: TrainLog,
}

/// Head labels and per-clip targets for a tagging task.
pub fn tagging_targets(clips: &[Clip], task: Task) -> Result<(TagHead, Vec<LabelTarget>)> {
    let mut labels = BTreeSet::new();
    for c in clips {
        let r = &c.record;
        match task {
            Task::At => match &r.events {
                Some(e) if !e.is_empty() => labels.extend(e.iter().cloned()),
                _ => return Err(Error::Data(format!("record {:?} has no event labels", r.id))),
            },
            Task::Asc => match &r.scene {
                Some(s) => {
                    labels.insert(s.clone());
                }
                None => return Err(Error::Data(format!("record {:?} has no scene label", r.id))),
            },
        }
    }
    let head = TagHead::new(task, labels.into_iter().collect())
        .map_err(|e| Error::Data(format!("cannot build a {task} head: {e}")))?;
    let targets = clips
        .iter()
        .map(|c| {
            head.target(c.record.events.as_deref(), c.record.scene.as_deref())
                .expect("labels collected from these records")
        })
        .collect();
    Ok((head, targets))
}

/// Trains encoder and tagging head; returns the best-validation checkpoint.
pub fn pretrain_loop(clips: &[Clip], cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let task = match cfg.task {
        TrainTask::Tagging(t) => t,
        TrainTask::Caption => return Err(Error::arg("pretraining needs task at or asc")),
    };
    let (head, targets) = tagging_targets(clips, task)?;
    let (train, val) = split_indices(clips.len(), cfg.val_fraction, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = cfg.encoder.init_params(&mut rng)?;
    params.merge(head.init_params(cfg.encoder.embed_dim, &mut rng));
    let enc_cfg = &cfg.encoder;
    let groups: Vec<Vec<usize>> = train.iter().map(|&i| vec![i]).collect();
    let fitted = fit(params, &groups, &val, cfg, &mut rng, |g, idx| {
        let batch = batch_features(clips, idx)?;
        let enc = encoder::forward(g, &batch, enc_cfg)?;
        let logits = head_logits(g, &enc)?;
        let t: Vec<LabelTarget> = idx.iter().map(|&i| targets[i].clone()).collect();
        Ok((head_loss(g, logits, &head, &t)?, idx.len() as f64))
    })?;
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            params: fitted.params,
            encoder: cfg.encoder.clone(),
            best_epoch: fitted.best_epoch,
            val_loss: fitted.val_loss,
        },
        head,
        log: fitted.log,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub vocab: Vocabulary,
    pub log: TrainLog,
}

pub fn decoder_config(cfg: &TrainConfig, vocab_size: usize) -> DecoderConfig {
    DecoderConfig {
        vocab_size,
        context_dim: cfg.encoder.embed_dim,
        word_dim: cfg.word_dim,
        hidden_dim: cfg.hidden_dim,
        attention_dim: cfg.attention_dim,
    }
}

/// Encoder (fresh or transferred) plus a fresh decoder, and the generator
/// left positioned for the training loop.
///
/// The fresh encoder is drawn even when `init` replaces it, so every
/// condition with the same seed starts from the same decoder.
pub fn initial_caption_params(
    cfg: &TrainConfig,
    vocab_size: usize,
    init: Option<&Checkpoint>,
) -> Result<(ParamStore<f64>, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fresh = cfg.encoder.init_params(&mut rng)?;
    let mut params = match init {
        Some(ck) => transfer_encoder(&ck.params, &cfg.encoder)?,
        None => fresh,
    };
    params.merge(decoder_config(cfg, vocab_size).init_params(&mut rng));
    Ok((params, rng))
}

/// Encoded captions per clip; every clip needs at least one non-empty caption.
fn caption_ids(clips: &[Clip], vocab: &Vocabulary) -> Result<Vec<Vec<Vec<usize>>>> {
    clips
        .iter()
        .map(|c| {
            let caps = c
                .record
                .captions
                .as_ref()
                .filter(|c| !c.is_empty())
                .ok_or_else(|| Error::Data(format!("record {:?} has no captions", c.record.id)))?;
            caps.iter()
                .map(|s| {
                    vocab
                        .encode(s)
                        .map_err(|e| Error::Data(format!("record {:?}: {e}", c.record.id)))
                })
                .collect()
        })
        .collect()
}

/// End-to-end teacher-forced training of encoder and decoder.
pub fn finetune_loop(clips: &[Clip], cfg: &TrainConfig, init: Option<&Checkpoint>) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let (train, val) = split_indices(clips.len(), cfg.val_fraction, cfg.seed)?;
    for c in clips {
        if c.record.captions.as_ref().is_none_or(|v| v.is_empty()) {
            return Err(Error::Data(format!("record {:?} has no captions", c.record.id)));
        }
    }
    let vocab = Vocabulary::from_captions(
        train
            .iter()
            .flat_map(|&i| clips[i].record.captions.iter().flatten().map(String::as_str)),
    )?;
    let captions = caption_ids(clips, &vocab)?;
    // one sample per (clip, caption) pair, grouped by clip
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut by_clip: Vec<Vec<usize>> = Vec::with_capacity(clips.len());
    for (i, caps) in captions.iter().enumerate() {
        by_clip.push((pairs.len()..pairs.len() + caps.len()).collect());
        pairs.extend((0..caps.len()).map(|k| (i, k)));
    }
    let train_groups: Vec<Vec<usize>> = train.iter().map(|&i| by_clip[i].clone()).collect();
    let val_pairs: Vec<usize> = val.iter().flat_map(|&i| by_clip[i].iter().copied()).collect();
    let (params, mut rng) = initial_caption_params(cfg, vocab.len(), init)?;
    let enc_cfg = &cfg.encoder;
    let fitted = fit(params, &train_groups, &val_pairs, cfg, &mut rng, |g, idx| {
        let mut uniq: Vec<usize> = Vec::new();
        let mut rows = Vec::with_capacity(idx.len());
        let mut caps = Vec::with_capacity(idx.len());
        for &p in idx {
            let (i, k) = pairs[p];
            let row = match uniq.iter().position(|&u| u == i) {
                Some(r) => r,
                None => {
                    uniq.push(i);
                    uniq.len() - 1
                }
            };
            rows.push(row);
            caps.push(captions[i][k].clone());
        }
        let batch = batch_features(clips, &uniq)?;
        let enc = encoder::forward(g, &batch, enc_cfg)?;
        let spread = Memory::gather(&mut g.tape, &enc, &rows)?;
        let vars = DecoderVars::load(g)?;
        let mem = Memory::new(&mut g.tape, &vars, spread.seq, &spread.lengths)?;
        let tokens: usize = caps.iter().map(|c| c.len() - 1).sum();
        Ok((teacher_forced_loss(&mut g.tape, &vars, &mem, &caps)?, tokens as f64))
    })?;
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            params: fitted.params,
            encoder: cfg.encoder.clone(),
            best_epoch: fitted.best_epoch,
            val_loss: fitted.val_loss,
        },
        vocab,
        log: fitted.log,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionOutput {
    pub id: String,
    pub caption: String,
    pub log_prob: f64,
}

/// Beam-search captions for every clip, in input order.
pub fn caption_clips(
    clips: &[Clip],
    params: &ParamStore<f64>,
    enc_cfg: &EncoderConfig,
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
) -> Result<Vec<CaptionOutput>> {
    let dec = DecoderConfig::from_params(params)?;
    if dec.vocab_size != vocab.len() {
        return Err(Error::Data(format!(
            "vocabulary has {} tokens but the checkpoint decoder expects {}",
            vocab.len(),
            dec.vocab_size
        )));
    }
    clips
        .iter()
        .map(|c| {
            let e = encoder::encode(&c.features, params, enc_cfg)?;
            let hyp = beam_search(&e, params, beam, max_len)?;
            Ok(CaptionOutput {
                id: c.record.id.clone(),
                caption: vocab.decode(&hyp.tokens),
                log_prob: hyp.log_prob,
            })
        })
        .collect()
}

/// Scores generated captions against the clips' reference captions.
pub fn score_captions(outputs: &[CaptionOutput], clips: &[Clip]) -> Result<MetricReport> {
    if outputs.len() != clips.len() {
        return Err(Error::dim(format!("{} captions for {} clips", outputs.len(), clips.len())));
    }
    let cands: Vec<&str> = outputs.iter().map(|o| o.caption.as_str()).collect();
    let refs = clips
        .iter()
        .map(|c| {
            c.record
                .captions
                .as_ref()
                .filter(|v| !v.is_empty())
                .map(|v| v.iter().map(String::as_str).collect::<Vec<_>>())
                .ok_or_else(|| Error::Data(format!("record {:?} has no reference captions", c.record.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_text(&cands, &refs)
}
