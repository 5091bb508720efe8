//! Deterministic tensor core: values, a reverse-mode tape, layer helpers and Adam.
//!
//! Everything here is generic over [`Scalar`]; the rest of the crate
//! instantiates it at `f64` (see the aliases at the crate root).

mod adam;
pub mod gradcheck;
pub mod nn;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use nn::{gru_cell, init_gru, update_running_stats, Graph, GruVars};
pub use params::{is_buffer_name, xavier_uniform, ParamStore};
pub use scalar::Scalar;
pub use tape::{BatchStats, Gradients, NormMode, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;
