use rustfft::num_complex::Complex;
use rustfft::{FftNum, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::Waveform;

/// Added to filterbank energies before the natural log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub n_mels: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16_000,
            window_ms: 40,
            hop_ms: 20,
            n_mels: 64,
        }
    }
}

impl MelConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as usize * self.hop_ms as usize) / 1000
    }

    pub fn n_fft(&self) -> usize {
        self.window_len().next_power_of_two()
    }

    /// Frames produced for `n` samples (no centering): `1 + (n - W) / H`.
    pub fn num_frames(&self, n: usize) -> Option<usize> {
        let w = self.window_len();
        (n >= w).then(|| 1 + (n - w) / self.hop_len())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank over the `n_fft/2 + 1` power bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels` rows of `n_fft/2 + 1` weights.
    pub weights: Vec<Vec<f64>>,
    /// Peak frequency of each band in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.n_fft() / 2 + 1;
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft() as f64;
        let weights = (0..cfg.n_mels)
            .map(|d| {
                let (lo, mid, hi) = (edges[d], edges[d + 1], edges[d + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - lo) / (mid - lo);
                        let down = (hi - f) / (hi - mid);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        MelFilterbank {
            weights,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
        }
    }

    /// Band whose center is closest to `hz`.
    pub fn nearest_band(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, &c) in self.centers_hz.iter().enumerate() {
            if (c - hz).abs() < (self.centers_hz[best] - hz).abs() {
                best = i;
            }
        }
        best
    }
}

/// `T × D` log-mel feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram<T> {
    pub values: Tensor<T>,
    pub hop_ms: u32,
    pub window_ms: u32,
}

impl<T: Scalar> LogMelSpectrogram<T> {
    pub fn from_values(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim(format!("log-mel matrix must be [T, D], got {:?}", values.shape())));
        }
        let cfg = MelConfig::default();
        Ok(LogMelSpectrogram {
            values,
            hop_ms: cfg.hop_ms,
            window_ms: cfg.window_ms,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bands(&self) -> usize {
        self.values.shape()[1]
    }

    /// Row of band values for frame `t`.
    pub fn frame(&self, t: usize) -> &[T] {
        let d = self.bands();
        &self.values.data()[t * d..(t + 1) * d]
    }
}

/// Reusable log-mel extractor (FFT plan, window and filterbank).
pub struct LogMel<T: FftNum> {
    cfg: MelConfig,
    window: Vec<f64>,
    bank: MelFilterbank,
    fft: std::sync::Arc<dyn rustfft::Fft<T>>,
}

impl<T: Scalar + FftNum> LogMel<T> {
    pub fn new(cfg: MelConfig) -> Self {
        let w = cfg.window_len();
        // periodic Hann
        let window = (0..w)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / w as f64).cos())
            .collect();
        let bank = MelFilterbank::new(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft());
        LogMel {
            cfg,
            window,
            bank,
            fft,
        }
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn compute(&self, wave: &Waveform) -> Result<LogMelSpectrogram<T>> {
        let cfg = &self.cfg;
        if wave.sample_rate != cfg.sample_rate {
            return Err(Error::format(
                "sample_rate",
                format!("{} Hz, features expect {} Hz (no resampling)", wave.sample_rate, cfg.sample_rate),
            ));
        }
        let (win, hop, n_fft) = (cfg.window_len(), cfg.hop_len(), cfg.n_fft());
        let frames = cfg.num_frames(wave.len()).ok_or(Error::InputTooShort {
            have: wave.len(),
            need: win,
        })?;
        let n_bins = n_fft / 2 + 1;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        let mut power = vec![0.0f64; n_bins];
        let mut out = Vec::with_capacity(frames * cfg.n_mels);
        for t in 0..frames {
            let seg = &wave.samples[t * hop..t * hop + win];
            for (slot, (&s, &w)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                *slot = Complex::new(T::of(s * w), T::zero());
            }
            for slot in &mut buf[win..] {
                *slot = Complex::new(T::zero(), T::zero());
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr().as_f64();
            }
            for row in &self.bank.weights {
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push(T::of((e + LOG_FLOOR).ln()));
            }
        }
        LogMelSpectrogram::from_values(Tensor::new(vec![frames, cfg.n_mels], out)?)
    }
}

/// One-shot log-mel with a fresh extractor.
pub fn log_mel<T: Scalar + FftNum>(wave: &Waveform, cfg: &MelConfig) -> Result<LogMelSpectrogram<T>> {
    LogMel::new(cfg.clone()).compute(wave)
}
