//! Neural sequence labeling: a character CNN and word embeddings feed a
//! bidirectional LSTM, whose emission scores are decoded by a linear-chain
//! CRF. Gradients come from a small f64 reverse-mode tape.

pub mod cli;
pub mod crf;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tape::{Tape, Var};
pub use tensor::{Gradients, ParamId, ParamSet, Tensor};
