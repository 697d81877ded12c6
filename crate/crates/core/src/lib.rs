//! A label-synchronous streaming transducer for simultaneous translation.
//!
//! The model reads source frames through a chunk-masked Transformer encoder,
//! accumulates learned frame weights, and fires a translation token whenever
//! the running weight sum strictly exceeds that token's threshold. Fired
//! tokens attend over every frame up to the firing boundary, and the result
//! is combined additively with an autoregressive prediction network. Training
//! couples cross-entropy with a target-side CTC branch and a quantity loss;
//! decoding runs an incremental in-chunk beam search that commits a shared
//! prefix at every chunk boundary. The crate also ships a synthetic
//! re-ordering task, a latency/quality evaluation harness (AL, LAAL, BLEU),
//! and a CLI covering the whole train/decode/evaluate loop.

pub mod error;
pub mod gradcheck;
pub mod aif;
pub mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod decode;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
