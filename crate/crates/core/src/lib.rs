//! Audio captioning with encoder transfer learning, at desk scale.
//!
//! Stage one trains an embedding extractor on audio tagging or acoustic scene
//! classification; stage two copies that extractor into an attentional
//! encoder-decoder captioner and trains the whole thing end to end.
//!
//! * [`numerics`]: tensor core with reverse-mode autodiff and Adam
//! * [`dsp`]: WAV reading and log-mel features
//! * [`encoder`]: CNN-mini / CRNN-mini embedding extractors
//! * [`pretrain`]: tagging heads and encoder transfer
//! * [`decoder`]: attentional GRU decoder, greedy and beam search
//! * [`pipeline`]: corpora, checkpoints and the training loops
//! * [`metrics`]: BLEU, ROUGE-L, CIDEr-D
//! * [`cli`]: command-line front end

pub mod cli;
pub mod decoder;
pub mod dsp;
pub mod encoder;
mod error;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;

pub use error::{Error, Result};

/// Scalar type used by the models and file formats.
pub type Real = f64;
pub type Tensor = numerics::Tensor<Real>;
pub type Tape = numerics::Tape<Real>;
pub type ParamStore = numerics::ParamStore<Real>;
pub type AdamState = numerics::AdamState<Real>;
pub type Graph<'a> = numerics::Graph<'a, Real>;
