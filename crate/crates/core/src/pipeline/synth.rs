//! Synthetic event-in-scene corpus.
//!
//! Each clip lays one or two sound events over a scene bed. Events are the
//! local topics of a caption and the scene its global topic; every caption
//! names all of them.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::parse_key_values;
use super::manifest::{Manifest, ManifestRecord};
use crate::dsp::{write_wav, Waveform};
use crate::error::{Error, Result};

/// Function words shared across phrases; everything else names one topic.
pub const FILLER: [&str; 6] = ["a", "an", "the", "of", "in", "and"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    PureTone,
    Chirp,
    NoiseBurst,
    ClickTrain,
    AmTone,
    HarmonicStack,
    SweepPair,
    SilenceGap,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::PureTone,
        EventKind::Chirp,
        EventKind::NoiseBurst,
        EventKind::ClickTrain,
        EventKind::AmTone,
        EventKind::HarmonicStack,
        EventKind::SweepPair,
        EventKind::SilenceGap,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EventKind::PureTone => "pure_tone",
            EventKind::Chirp => "chirp",
            EventKind::NoiseBurst => "noise_burst",
            EventKind::ClickTrain => "click_train",
            EventKind::AmTone => "am_tone",
            EventKind::HarmonicStack => "harmonic_stack",
            EventKind::SweepPair => "sweep_pair",
            EventKind::SilenceGap => "silence_gap",
        }
    }

    pub fn phrases(self) -> [&'static str; 3] {
        match self {
            EventKind::PureTone => ["a steady tone sounds", "a constant beep plays", "a pure tone rings"],
            EventKind::Chirp => ["a short chirp rises", "a quick chirp climbs", "a rising chirp flicks"],
            EventKind::NoiseBurst => ["a burst of static hisses", "a static burst crackles", "a sharp hiss bursts"],
            EventKind::ClickTrain => ["a rapid series of clicks", "a ticking rattle repeats", "a fast clicking runs"],
            EventKind::AmTone => ["a siren wails", "an alarm warbles", "a wavering siren pulses"],
            EventKind::HarmonicStack => ["an organ chord drones", "a deep organ note sustains", "a rich chord resonates"],
            EventKind::SweepPair => [
                "two whistles glide apart",
                "a pair of whistles sweep",
                "twin whistles slide in opposite directions",
            ],
            EventKind::SilenceGap => ["the sound briefly stops", "a sudden silence falls", "a brief pause interrupts"],
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| Error::arg(format!("unknown event {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SceneKind {
    QuietRoom,
    NoisyRoom,
    HumRoom,
    WindyField,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::QuietRoom,
        SceneKind::NoisyRoom,
        SceneKind::HumRoom,
        SceneKind::WindyField,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SceneKind::QuietRoom => "quiet_room",
            SceneKind::NoisyRoom => "noisy_room",
            SceneKind::HumRoom => "hum_room",
            SceneKind::WindyField => "windy_field",
        }
    }

    pub fn phrases(self) -> [&'static str; 3] {
        match self {
            SceneKind::QuietRoom => ["in a quiet room", "in a calm empty room", "in a still room"],
            SceneKind::NoisyRoom => ["in a noisy room", "in a loud busy room", "amid heavy background noise"],
            SceneKind::HumRoom => ["in a room with a low hum", "over a low electrical hum", "near a humming machine"],
            SceneKind::WindyField => ["in a windy field", "outdoors in strong wind", "in an open field as wind blows"],
        }
    }

    /// Bed level in dB relative to full scale (RMS).
    pub fn level_db(self) -> f64 {
        match self {
            SceneKind::QuietRoom => -60.0,
            SceneKind::NoisyRoom => -20.0,
            SceneKind::HumRoom => -30.0,
            SceneKind::WindyField => -25.0,
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| Error::arg(format!("unknown scene {s:?}")))
    }
}

/// Caption `k`: paraphrase `k` of every event joined by "and", then scene paraphrase `k`.
pub fn caption(events: &[EventKind], scene: SceneKind, k: usize) -> String {
    let ev: Vec<&str> = events.iter().map(|e| e.phrases()[k]).collect();
    format!("{} {}", ev.join(" and "), scene.phrases()[k])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub clip_secs: f64,
    pub events: Vec<EventKind>,
    pub scenes: Vec<SceneKind>,
    pub min_events: usize,
    pub max_events: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            sample_rate: 16000,
            clip_secs: 2.0,
            events: EventKind::ALL.to_vec(),
            scenes: SceneKind::ALL.to_vec(),
            min_events: 1,
            max_events: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || !(self.clip_secs >= 1.0) {
            return Err(Error::arg("clips need a positive sample rate and at least 1 s"));
        }
        if self.scenes.is_empty() || self.min_events == 0 || self.min_events > self.max_events {
            return Err(Error::arg("need at least one scene and 1 <= min_events <= max_events"));
        }
        if self.max_events > self.events.len() {
            return Err(Error::arg(format!(
                "max_events {} exceeds the {} available events",
                self.max_events,
                self.events.len()
            )));
        }
        Ok(())
    }

    /// Overrides from `key = value` text: clip_secs, sample_rate, min_events, max_events, events, scenes.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (k, v, line) in parse_key_values(text, origin)? {
            let bad = |what: &str| Error::arg(format!("{origin}:{line}: {what}"));
            match k.as_str() {
                "clip_secs" => self.clip_secs = v.parse().map_err(|_| bad("clip_secs is not a number"))?,
                "sample_rate" => self.sample_rate = v.parse().map_err(|_| bad("sample_rate is not an integer"))?,
                "min_events" => self.min_events = v.parse().map_err(|_| bad("min_events is not an integer"))?,
                "max_events" => self.max_events = v.parse().map_err(|_| bad("max_events is not an integer"))?,
                "events" => {
                    self.events = v
                        .split(',')
                        .map(|s| EventKind::from_label(s.trim()))
                        .collect::<Result<_>>()?
                }
                "scenes" => {
                    self.scenes = v
                        .split(',')
                        .map(|s| SceneKind::from_label(s.trim()))
                        .collect::<Result<_>>()?
                }
                _ => return Err(bad(&format!("unknown synth key {k:?}"))),
            }
        }
        self.validate()
    }

    fn samples(&self) -> usize {
        (self.clip_secs * self.sample_rate as f64).round() as usize
    }
}

/// One placed event. `freq` and `aux` carry kind-specific parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventInstance {
    pub kind: EventKind,
    pub onset: f64,
    pub duration: f64,
    pub freq: f64,
    pub aux: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipPlan {
    pub scene: SceneKind,
    pub events: Vec<EventInstance>,
}

fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn place(kind: EventKind, clip_secs: f64, rng: &mut ChaCha8Rng) -> EventInstance {
    let (dur, freq, aux) = match kind {
        EventKind::PureTone => (rng.random_range(0.5..1.2), rng.random_range(400.0..1200.0), 0.0),
        EventKind::Chirp => (
            rng.random_range(0.15..0.35),
            rng.random_range(500.0..900.0),
            rng.random_range(2500.0..4000.0),
        ),
        EventKind::NoiseBurst => (rng.random_range(0.1..0.4), 0.0, 0.0),
        EventKind::ClickTrain => (rng.random_range(0.5..1.0), rng.random_range(8.0..20.0), 0.0),
        EventKind::AmTone => (
            rng.random_range(0.6..1.2),
            rng.random_range(1500.0..2500.0),
            rng.random_range(5.0..9.0),
        ),
        EventKind::HarmonicStack => (rng.random_range(0.6..1.2), rng.random_range(110.0..220.0), 0.0),
        EventKind::SweepPair => (rng.random_range(0.4..0.8), rng.random_range(1200.0..1800.0), 0.0),
        EventKind::SilenceGap => (rng.random_range(0.3..0.6), 0.0, 0.0),
    };
    EventInstance {
        kind,
        onset: rng.random_range(0.0..clip_secs - dur),
        duration: dur,
        freq,
        aux,
    }
}

/// Scene and events for clip `index`; a pure function of `(spec, seed, index)`.
pub fn plan_clip(spec: &SynthSpec, seed: u64, index: u64) -> ClipPlan {
    let mut rng = clip_rng(seed, index);
    let scene = spec.scenes[rng.random_range(0..spec.scenes.len())];
    let n = rng.random_range(spec.min_events..=spec.max_events);
    let mut kinds = spec.events.clone();
    kinds.shuffle(&mut rng);
    let events = kinds[..n].iter().map(|&k| place(k, spec.clip_secs, &mut rng)).collect();
    ClipPlan { scene, events }
}

fn white(rng: &mut ChaCha8Rng, n: usize, rms: f64) -> Vec<f64> {
    let a = rms * 3f64.sqrt();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

fn scale_to_rms(x: &mut [f64], rms: f64) {
    let cur = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if cur > 0.0 {
        x.iter_mut().for_each(|v| *v *= rms / cur);
    }
}

fn bed(scene: SceneKind, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let level = 10f64.powf(scene.level_db() / 20.0);
    let floor = 10f64.powf(-60.0 / 20.0);
    match scene {
        SceneKind::QuietRoom | SceneKind::NoisyRoom => white(rng, n, level),
        SceneKind::HumRoom => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut hum: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * 50.0 * t + phase).sin() + 0.3 * (2.0 * PI * 150.0 * t + phase).sin()
                })
                .collect();
            scale_to_rms(&mut hum, level);
            let noise = white(rng, n, floor);
            hum.iter().zip(noise).map(|(h, w)| h + w).collect()
        }
        SceneKind::WindyField => {
            let raw = white(rng, n, 1.0);
            let gust_rate = rng.random_range(0.3..0.8);
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut y = 0.0;
            let mut wind: Vec<f64> = raw
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    y += 0.03 * (x - y);
                    let t = i as f64 / sr;
                    y * (0.6 + 0.4 * (2.0 * PI * gust_rate * t + phase).sin())
                })
                .collect();
            scale_to_rms(&mut wind, level);
            let noise = white(rng, n, floor);
            wind.iter().zip(noise).map(|(h, w)| h + w).collect()
        }
    }
}

/// 10 ms linear attack and release.
fn envelope(t: f64, dur: f64) -> f64 {
    let ramp = 0.01;
    (t / ramp).min((dur - t) / ramp).clamp(0.0, 1.0)
}

fn event_signal(e: &EventInstance, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (e.duration * sr).round() as usize;
    let mut phase = 0.0;
    let mut phase2 = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let frac = t / e.duration;
        let v = match e.kind {
            EventKind::PureTone => 0.25 * (2.0 * PI * e.freq * t).sin(),
            EventKind::Chirp => {
                phase += 2.0 * PI * (e.freq + (e.aux - e.freq) * frac) / sr;
                0.3 * phase.sin()
            }
            EventKind::NoiseBurst => rng.random_range(-0.3..0.3),
            EventKind::ClickTrain => {
                let since = t % (1.0 / e.freq);
                0.5 * (-since / 0.0015).exp() * (2.0 * PI * 3000.0 * since).sin()
            }
            EventKind::AmTone => {
                0.3 * (0.5 + 0.5 * (2.0 * PI * e.aux * t).sin()) * (2.0 * PI * e.freq * t).sin()
            }
            EventKind::HarmonicStack => {
                (1..=8).map(|k| (2.0 * PI * e.freq * k as f64 * t).sin() / k as f64).sum::<f64>() * 0.12
            }
            EventKind::SweepPair => {
                phase += 2.0 * PI * e.freq * (1.0 + frac) / sr;
                phase2 += 2.0 * PI * e.freq * (1.0 - 0.5 * frac) / sr;
                0.15 * (phase.sin() + phase2.sin())
            }
            EventKind::SilenceGap => 0.0,
        };
        out.push(v * envelope(t, e.duration));
    }
    out
}

/// Renders a planned clip; noise draws come from the `(seed, index)` stream.
pub fn render_clip(spec: &SynthSpec, plan: &ClipPlan, seed: u64, index: u64) -> Result<Waveform> {
    let sr = spec.sample_rate as f64;
    let n = spec.samples();
    // a second stream family keeps rendering independent of planning draws
    let mut rng = clip_rng(seed ^ 0x5EED_0F_A0D10, index);
    let mut mix = bed(plan.scene, n, sr, &mut rng);
    for e in plan.events.iter().filter(|e| e.kind != EventKind::SilenceGap) {
        let start = (e.onset * sr).round() as usize;
        for (i, v) in event_signal(e, sr, &mut rng).into_iter().enumerate() {
            if let Some(m) = mix.get_mut(start + i) {
                *m += v;
            }
        }
    }
    for e in plan.events.iter().filter(|e| e.kind == EventKind::SilenceGap) {
        let start = (e.onset * sr).round() as usize;
        let len = (e.duration * sr).round() as usize;
        for i in 0..len {
            if let Some(m) = mix.get_mut(start + i) {
                *m *= 1.0 - envelope(i as f64 / sr, e.duration);
            }
        }
    }
    mix.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Waveform::new(mix, spec.sample_rate)
}

pub fn clip_record(plan: &ClipPlan, index: u64) -> ManifestRecord {
    let id = format!("clip_{index:05}");
    let kinds: Vec<EventKind> = plan.events.iter().map(|e| e.kind).collect();
    ManifestRecord {
        audio: format!("{id}.wav"),
        id,
        events: Some(kinds.iter().map(|k| k.label().to_string()).collect()),
        scene: Some(plan.scene.label().to_string()),
        captions: Some((0..3).map(|k| caption(&kinds, plan.scene, k)).collect()),
    }
}

/// Writes `n_clips` WAV files and `manifest.jsonl` into `out_dir`.
pub fn synth_generate(spec: &SynthSpec, n_clips: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    if n_clips == 0 {
        return Err(Error::arg("n_clips must be at least 1"));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(n_clips);
    for i in 0..n_clips as u64 {
        let plan = plan_clip(spec, seed, i);
        let wave = render_clip(spec, &plan, seed, i)?;
        let rec = clip_record(&plan, i);
        write_wav(dir.join(&rec.audio), &wave)?;
        records.push(rec);
    }
    let manifest = Manifest {
        dir: dir.to_path_buf(),
        records,
    };
    manifest.write(dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
