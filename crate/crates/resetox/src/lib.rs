//! Redo-search-if-toxic: inference-time mitigation of added toxicity in a
//! toy sequence-to-sequence translation model.
//!
//! When a word-list classifier flags toxicity among the most probable next
//! tokens during beam search, the decoder's cached attention keys and values
//! are nudged by one normalized gradient step on a combined
//! mitigation/faithfulness objective, the inference step is redone on the
//! re-learnt caches, and the beam candidates are re-scored. The crate carries
//! everything needed to exercise that mechanism end to end: a tape-based
//! autodiff engine, the transformer, the lexicon classifier, the guided beam
//! decoder, training and synthetic-corpus machinery, and evaluation metrics.
//!
//! Start with the runnable programs in `examples/`, or the `resetox` binary
//! for the file-based pipeline.

pub mod error;
pub mod model;
pub mod tensor;
pub mod toxicity;

pub use error::{Error, Result};
pub use model::{DecoderContext, ModelConfig, ModelParams, NextTokenDistribution};
pub use tensor::{Tape, Tensor, Var};
