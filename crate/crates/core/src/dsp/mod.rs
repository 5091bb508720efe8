//! PCM audio to log-mel features.

mod mel;
mod wav;

pub use mel::{hz_to_mel, log_mel, mel_to_hz, LogMel, LogMelSpectrogram, MelConfig, MelFilterbank, LOG_FLOOR};
pub use wav::{encode_wav, parse_wav, read_wav, write_wav, Waveform};
