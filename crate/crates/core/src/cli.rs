//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or format errors.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::decoder::Vocabulary;
use crate::dsp::{log_mel, read_wav, MelConfig};
use crate::error::{Error, Result};
use crate::metrics::{read_eval_jsonl, MetricReport};
use crate::pipeline::{
    caption_clips, finetune_loop, load_clips, pretrain_loop, synth_generate, Checkpoint, Clip,
    Manifest, ManifestRecord, SynthSpec, TrainConfig, TrainLog,
};
use crate::pretrain::Task;

#[derive(Parser, Debug)]
#[command(name = "audiocap", version, about = "Two-stage audio captioning: pretrain, fine-tune, caption, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic event/scene corpus.
    Synth {
        /// key = value overrides of the generator settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute log-mel features for every clip of a manifest.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the encoder on audio tagging or scene classification.
    Pretrain {
        #[arg(long, value_parser = ["at", "asc"])]
        task: String,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Stage 2: train encoder and decoder on captions.
    Finetune {
        /// Stage-1 checkpoint whose encoder is transferred.
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        #[arg(long)]
        vocab_out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Caption clips with beam search; prints one JSON line per clip.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        audio: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 22)]
        max_len: usize,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Score captions against references.
    Evaluate {
        /// Caption output lines {id, caption, ...}.
        #[arg(long, requires = "ref_manifest", conflicts_with = "input", required_unless_present = "input")]
        hyp: Option<PathBuf>,
        #[arg(long)]
        ref_manifest: Option<PathBuf>,
        /// Lines {id, candidate, references}.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// key = value training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Feature cache directory, as written by `featurize`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Where to write the epoch,train_loss,val_loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra KEY=VALUE setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TrainArgs {
    fn config(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("--set {kv:?}: expected KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::arg(format!("--set {kv:?}: {e}")))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn clips(&self) -> Result<Vec<Clip>> {
        let m = Manifest::read(&self.manifest)?;
        load_clips(&m, self.features.as_deref())
    }

    fn finish(&self, ck: &Checkpoint, log: &TrainLog) -> Result<()> {
        ck.write(&self.out_ckpt)?;
        if let Some(p) = &self.log {
            log.write_csv(p)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct CaptionLine<'a> {
    id: &'a str,
    caption: &'a str,
    log_prob: f64,
}

/// Parses `args` (program name first) and runs the command, returning the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                2
            } else {
                1
            }
        }
    }
}

fn emit(out: &mut impl Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn execute(cmd: Command, out: &mut impl Write) -> Result<()> {
    match cmd {
        Command::Synth { spec, n, seed, out: dir } => {
            if n == 0 {
                return Err(Error::arg("--n must be at least 1"));
            }
            let mut s = SynthSpec::default();
            if let Some(p) = spec {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                s.apply_text(&text, &p.display().to_string())?;
            }
            let m = synth_generate(&s, n, seed, &dir)?;
            emit(out, &format!("wrote {} clips to {}", m.records.len(), dir.display()))
        }
        Command::Featurize { manifest, out: dir } => {
            let m = Manifest::read(&manifest)?;
            let clips = load_clips(&m, Some(&dir))?;
            emit(out, &format!("featurized {} clips into {}", clips.len(), dir.display()))
        }
        Command::Pretrain { task, train } => {
            let task: Task = task.parse()?;
            let cfg = train.config(TrainConfig::pretrain(task))?;
            let clips = train.clips()?;
            let o = pretrain_loop(&clips, &cfg)?;
            train.finish(&o.checkpoint, &o.log)?;
            emit(
                out,
                &format!(
                    "best epoch {} val_loss {} -> {}",
                    o.checkpoint.best_epoch,
                    o.checkpoint.val_loss,
                    train.out_ckpt.display()
                ),
            )
        }
        Command::Finetune {
            init_ckpt,
            vocab_out,
            train,
        } => {
            let init = init_ckpt.as_ref().map(Checkpoint::read).transpose()?;
            let mut base = TrainConfig::finetune();
            if let Some(ck) = &init {
                base.encoder = ck.encoder.clone();
            }
            let cfg = train.config(base)?;
            let clips = train.clips()?;
            let o = finetune_loop(&clips, &cfg, init.as_ref())?;
            train.finish(&o.checkpoint, &o.log)?;
            o.vocab.write(&vocab_out)?;
            emit(
                out,
                &format!(
                    "best epoch {} val_loss {} -> {}",
                    o.checkpoint.best_epoch,
                    o.checkpoint.val_loss,
                    train.out_ckpt.display()
                ),
            )
        }
        Command::Caption {
            ckpt,
            vocab,
            audio,
            manifest,
            beam,
            max_len,
            features,
        } => {
            let ck = Checkpoint::read(&ckpt)?;
            let vocab = Vocabulary::read(&vocab)?;
            let clips = match (audio, manifest) {
                (Some(a), _) => vec![audio_clip(&a)?],
                (None, Some(m)) => load_clips(&Manifest::read(&m)?, features.as_deref())?,
                (None, None) => return Err(Error::arg("give --audio or --manifest")),
            };
            for o in caption_clips(&clips, &ck.params, &ck.encoder, &vocab, beam, max_len)? {
                let line = CaptionLine {
                    id: &o.id,
                    caption: &o.caption,
                    log_prob: o.log_prob,
                };
                emit(out, &serde_json::to_string(&line).expect("plain struct"))?;
            }
            Ok(())
        }
        Command::Evaluate {
            hyp,
            ref_manifest,
            input,
        } => {
            let (cands, refs) = match (hyp, ref_manifest, input) {
                (Some(h), Some(r), None) => join_hypotheses(&h, &r)?,
                (None, None, Some(i)) => read_eval_jsonl(&i)?
                    .into_iter()
                    .map(|r| (r.candidate, r.references))
                    .unzip(),
                _ => return Err(Error::arg("give --hyp with --ref-manifest, or --input")),
            };
            let report = MetricReport::from_text(&cands, &refs)?;
            emit(out, &report.to_json())?;
            emit(out, MetricReport::csv_header())?;
            emit(out, &report.csv_row())
        }
    }
}

fn audio_clip(path: &Path) -> Result<Clip> {
    let wave = read_wav(path)?;
    let features = log_mel(&wave, &MelConfig::default()).map_err(|e| match e {
        Error::InputTooShort { .. } => Error::Data(format!("{}: {e}", path.display())),
        other => other,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Clip {
        record: ManifestRecord {
            id,
            audio: path.display().to_string(),
            events: None,
            scene: None,
            captions: None,
        },
        features,
    })
}

/// Pairs caption-output lines with the manifest's reference captions, in manifest order.
fn join_hypotheses(hyp: &Path, refs: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(hyp).map_err(|e| Error::io(hyp, e))?;
    let mut by_id: HashMap<String, String> = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let at = || format!("{}:{}", hyp.display(), i + 1);
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::format("hypothesis", format!("{}: {e}", at())))?;
        let field = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .ok_or_else(|| Error::format("hypothesis", format!("{}: missing string field {k:?}", at())))
        };
        let id = field("id")?;
        if by_id.insert(id.clone(), field("caption")?).is_some() {
            return Err(Error::format("hypothesis", format!("{}: duplicate id {id:?}", at())));
        }
    }
    let m = Manifest::read(refs)?;
    let mut cands = Vec::new();
    let mut references = Vec::new();
    for r in &m.records {
        let rc = r
            .captions
            .clone()
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Data(format!("{}: record {:?} has no captions", refs.display(), r.id)))?;
        let c = by_id
            .remove(&r.id)
            .ok_or_else(|| Error::Data(format!("{}: no caption for record {:?}", hyp.display(), r.id)))?;
        cands.push(c);
        references.push(rc);
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(Error::Data(format!(
            "{}: id {extra:?} is not in {}",
            hyp.display(),
            refs.display()
        )));
    }
    Ok((cands, references))
}
