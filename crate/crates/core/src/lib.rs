//! Channel-adversarial training (CAT) for cross-channel, text-independent
//! speaker recognition.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors and a tape-based reverse-mode engine
//! - [`layers`]: convolution, pooling, batch norm, dropout, LSTM and the
//!   gradient reversal layer
//! - [`losses`]: softmax, triplet, combined and channel-adversarial losses
//! - [`data`]: WAV parsing, log mel filter banks, the synthetic two-channel
//!   corpus and batch assembly
//! - [`model`]: the convolutional baseline and the CAT model
//!   (LSTM generator, speaker predictor, channel discriminator)
//! - [`train`]: SGD, dev-driven learning-rate decay and checkpoints
//! - [`eval`]: cosine scoring, EER, TopN recall and the β sweep
//! - [`cli`]: the `cat-speaker` command-line driver
//!
//! Runnable walkthroughs for each part live in `examples/`.

// `!(x >= 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod model;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
