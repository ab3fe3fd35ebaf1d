//! Semi-supervised cross-view consistency training for sequence models.
//!
//! A shared CNN-BiLSTM sentence encoder feeds a full-view primary prediction
//! module per task. On unlabeled sentences, auxiliary prediction modules that
//! see restricted views of the input (forward-only context, backward-only
//! context, and so on) are trained to match the primary module's predictions,
//! which improves the shared representations. Labeled and unlabeled
//! minibatches alternate during training.
//!
//! The crate is organized around:
//!
//! - [`graph`]: a small reverse-mode differentiation engine with gradient
//!   checking, plus the parameter store shared by all models.
//! - [`encoder`]: vocabulary handling and the char-CNN + two-layer Bi-LSTM
//!   sentence encoder.
//! - [`tagging`], [`parsing`], [`seq2seq`]: task heads with their
//!   restricted-view student modules, losses, decoding, and metrics.
//! - [`trainer`]: SGD with momentum, EMA shadow weights, the alternating
//!   labeled/unlabeled training loop, word-dropout and virtual-adversarial
//!   baseline students, frozen-encoder transfer, and checkpointing.
//! - [`data`]: corpus loaders, vocabulary construction, synthetic task
//!   generators, split hygiene, and the experiment runner behind the CLI.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod data;
pub mod encoder;
pub mod graph;
pub mod parsing;
pub mod seq2seq;
pub mod tagging;
pub mod trainer;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
