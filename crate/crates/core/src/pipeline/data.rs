//! Featurized clips, the feature cache and the development split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{read_tensors, write_tensors};
use super::manifest::{Manifest, ManifestRecord};
use crate::dsp::{log_mel, read_wav, LogMelSpectrogram, MelConfig};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// A manifest record with its log-mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub record: ManifestRecord,
    pub features: LogMelSpectrogram<f64>,
}

fn cache_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.lmel"))
}

pub fn featurize_record(manifest: &Manifest, r: &ManifestRecord, mel: &MelConfig) -> Result<LogMelSpectrogram<f64>> {
    let wave = read_wav(manifest.audio_path(r))?;
    log_mel(&wave, mel).map_err(|e| match e {
        Error::InputTooShort { .. } | Error::Format { .. } => {
            Error::Data(format!("record {:?} ({}): {e}", r.id, manifest.audio_path(r).display()))
        }
        other => other,
    })
}

pub fn write_features(path: &Path, x: &LogMelSpectrogram<f64>) -> Result<()> {
    let mut s = ParamStore::new();
    s.insert("logmel", x.values.clone());
    write_tensors(path, &s)
}

pub fn read_features(path: &Path) -> Result<LogMelSpectrogram<f64>> {
    let mut s = read_tensors(path)?;
    let v = s
        .remove("logmel")
        .ok_or_else(|| Error::format("features", format!("{} has no logmel tensor", path.display())))?;
    LogMelSpectrogram::from_values(v)
}

/// Features for every record in manifest order. With a cache directory, cached
/// files are reused and missing ones are written.
pub fn load_clips(manifest: &Manifest, cache: Option<&Path>) -> Result<Vec<Clip>> {
    let mel = MelConfig::default();
    if let Some(dir) = cache {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    manifest
        .records
        .iter()
        .map(|r| {
            let features = match cache.map(|d| cache_path(d, &r.id)) {
                Some(p) if p.exists() => read_features(&p)?,
                Some(p) => {
                    let x = featurize_record(manifest, r, &mel)?;
                    write_features(&p, &x)?;
                    x
                }
                None => featurize_record(manifest, r, &mel)?,
            };
            Ok(Clip {
                record: r.clone(),
                features,
            })
        })
        .collect()
}

/// Shuffled index partition with `round(n · val_fraction)` validation items,
/// kept within `1..n`. Both halves are returned in ascending index order.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} record(s) into train and validation")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::arg(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

pub fn split_dev<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, val) = split_indices(items.len(), val_fraction, seed)?;
    Ok((
        train.iter().map(|&i| items[i].clone()).collect(),
        val.iter().map(|&i| items[i].clone()).collect(),
    ))
}
