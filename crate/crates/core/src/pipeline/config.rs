//! Training configuration and the flat `key = value` file format.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pretrain::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainTask {
    Tagging(Task),
    Caption,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TrainTask,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub bn_momentum: f64,
}

impl TrainConfig {
    /// Stage 1: lr 1e-3, batches of 64.
    pub fn pretrain(task: Task) -> Self {
        TrainConfig {
            task: TrainTask::Tagging(task),
            lr: 1e-3,
            batch_size: 64,
            val_fraction: 0.1,
            patience: 5,
            max_epochs: 50,
            seed: 0,
            encoder: EncoderConfig::default(),
            word_dim: 64,
            hidden_dim: 128,
            attention_dim: 128,
            bn_momentum: 0.9,
        }
    }

    /// Stage 2: lr 5e-4, batches of 32.
    pub fn finetune() -> Self {
        TrainConfig {
            task: TrainTask::Caption,
            lr: 5e-4,
            batch_size: 32,
            ..Self::pretrain(Task::At)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::arg(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::arg("batch_size and max_epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::arg("bn_momentum must lie in [0, 1)"));
        }
        if self.word_dim == 0 || self.hidden_dim == 0 || self.attention_dim == 0 {
            return Err(Error::arg("decoder dimensions must be positive"));
        }
        self.encoder.validate()
    }

    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::arg(format!("config key {key:?}: cannot parse {v:?}")))
        }
        match key {
            "task" => {
                self.task = match value {
                    "caption" => TrainTask::Caption,
                    other => TrainTask::Tagging(other.parse()?),
                }
            }
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "encoder" | "variant" => self.encoder.variant = value.parse()?,
            "channels" => {
                self.encoder.channels = value
                    .split(',')
                    .map(|c| num(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "time_subsample" => self.encoder.time_subsample = num(key, value)?,
            "embed_dim" => self.encoder.embed_dim = num(key, value)?,
            "recurrent_hidden" => self.encoder.recurrent_hidden = num(key, value)?,
            "n_mels" => self.encoder.n_mels = num(key, value)?,
            "word_dim" => self.word_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "attention_dim" => self.attention_dim = num(key, value)?,
            _ => return Err(Error::arg(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (key, value, line) in parse_key_values(text, origin)? {
            self.set(&key, &value)
                .map_err(|e| Error::arg(format!("{origin}:{line}: {e}")))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }
}

/// `key = value` lines; `#` starts a comment. Returns `(key, value, line number)`.
pub fn parse_key_values(text: &str, origin: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("config", format!("{origin}:{}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}
