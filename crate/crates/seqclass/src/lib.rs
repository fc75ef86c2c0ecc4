//! A from-scratch recurrent-network text classifier.
//!
//! The pipeline: tweets are lowercased, tokenized and mapped through a
//! frequency-ranked vocabulary into fixed-length integer sequences (index
//! 0 covers padding and unknown words); an embedding table turns each
//! index into a dense vector; a plain RNN or a peephole LSTM consumes the
//! sequence; dropout regularizes the final hidden state; a sigmoid or
//! softmax head produces class probabilities. Training is minibatch SGD
//! with hand-derived backpropagation through time, verified against a
//! finite-difference oracle. Evaluation reports per-class and
//! micro-averaged precision/recall/F-score.
//!
//! Everything is deterministic given a seed: the splitmix64 generator
//! drives initialization, shuffling and dropout, so identical runs produce
//! identical models byte for byte.

pub mod cli;
pub mod encoding;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
