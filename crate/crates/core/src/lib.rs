//! Multimodal sequence-to-sequence translation: an attentional LSTM baseline,
//! visual fusion at the decoder input, attention and loss levels, and the
//! analyses used to probe whether visual features help.

pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod losses;
pub mod numerics;
pub mod seq2seq;
pub mod training;

pub use error::{Error, Result};
