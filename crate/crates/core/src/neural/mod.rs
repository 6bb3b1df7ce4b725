//! Desk-scale transformer with state-flag relative positions.

pub mod checkpoint;
pub mod flags;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

use thiserror::Error;

use crate::vocab::TokenId;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use flags::{FlagInput, FlagStrings};
pub use kernels::cross_attention_rel;
pub use model::{DecoderState, EncodedInput, FlagCache, FlagTensor, Model, ModelConfig, Sample};
pub use optim::{Adam, AdamConfig};
pub use params::{apply_freeze_mask, FreezeMode, Grads, ParamStore};
pub use tensor::Mat;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what} length {len} exceeds the maximum {max}")]
    TooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("token id {0} is outside the model vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("flag `{0}` contains a character outside the flag alphabet")]
    BadFlag(String),
    #[error("state flags are required by a flag model and refused by a baseline model")]
    NoFlags,
    #[error("flag input is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    FlagShape {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint vocabulary has {found} tokens, expected {expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("{0}")]
    Io(String),
}
