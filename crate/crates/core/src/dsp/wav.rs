//! 16-bit PCM mono WAV reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::format("sample_rate", "must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::format("samples", format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Format { field, detail } => Error::format(field, format!("{detail} ({})", path.display())),
        other => other,
    })
}

fn u16_at(b: &[u8], at: usize, field: &str) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| Error::format(field, "truncated header"))
}

fn u32_at(b: &[u8], at: usize, field: &str) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::format(field, "truncated header"))
}

/// Parses a RIFF/WAVE byte buffer; samples are scaled by 1/32768.
pub fn parse_wav(b: &[u8]) -> Result<Waveform> {
    if b.get(0..4) != Some(b"RIFF") {
        return Err(Error::format("riff", "missing RIFF magic"));
    }
    if b.get(8..12) != Some(b"WAVE") {
        return Err(Error::format("wave", "missing WAVE form type"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    loop {
        let id = b
            .get(pos..pos + 4)
            .ok_or_else(|| Error::format("data", "no data chunk before end of file"))?;
        let size = u32_at(b, pos + 4, "chunk size")? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("fmt", format!("chunk too small ({size} bytes)")));
                }
                let audio_format = u16_at(b, body, "fmt.audio_format")?;
                let channels = u16_at(b, body + 2, "fmt.channels")?;
                let rate = u32_at(b, body + 4, "fmt.sample_rate")?;
                let bits = u16_at(b, body + 14, "fmt.bits_per_sample")?;
                fmt = Some((audio_format, channels, rate, bits));
            }
            b"data" => {
                let (audio_format, channels, rate, bits) =
                    fmt.ok_or_else(|| Error::format("fmt", "data chunk before fmt chunk"))?;
                if audio_format != 1 {
                    return Err(Error::format("fmt.audio_format", format!("{audio_format} is not PCM (1)")));
                }
                if channels != 1 {
                    return Err(Error::format("fmt.channels", format!("{channels} channels, expected mono")));
                }
                if bits != 16 {
                    return Err(Error::format("fmt.bits_per_sample", format!("{bits}, expected 16")));
                }
                if rate == 0 {
                    return Err(Error::format("fmt.sample_rate", "zero"));
                }
                let data = b
                    .get(body..body + size)
                    .ok_or_else(|| Error::format("data", format!("declares {size} bytes, file is truncated")))?;
                if size % 2 != 0 {
                    return Err(Error::format("data", "odd byte count for 16-bit samples"));
                }
                let samples = data
                    .chunks_exact(2)
                    .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
}

/// Quantises to 16-bit PCM (clipping to the representable range).
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(w)).map_err(|e| Error::io(path, e))
}
