//! Dataset handling, checkpoints and the two-stage training loops.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod manifest;
pub mod synth;
pub mod train;

pub use checkpoint::{read_tensors, write_tensors, Checkpoint};
pub use config::{TrainConfig, TrainTask};
pub use data::{load_clips, split_dev, split_indices, Clip};
pub use manifest::{Manifest, ManifestRecord};
pub use synth::{synth_generate, SynthSpec};
pub use train::{
    caption_clips, finetune_loop, initial_caption_params, pretrain_loop, score_captions, CaptionOutput, EpochLog,
    FinetuneOutcome, PretrainOutcome, TrainLog,
};
