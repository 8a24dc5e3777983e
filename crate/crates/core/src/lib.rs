//! Desk-scale pipeline for domain-adapted masked-language-model training on
//! materials-science text.
//!
//! The crate covers the full loop: Unicode normalization, uncased WordPiece
//! vocabulary training and tokenization, a BERT-style transformer encoder on a
//! reverse-mode autodiff tape, dynamic whole-word-masking pretraining with
//! AdamW and a linear warmup/decay schedule, downstream token tagging
//! (linear / CRF / BiLSTM-CRF heads), entity-marker relation classification,
//! whole-text classification, and CoNLL-convention entity-level evaluation.
//!
//! Everything runs on the CPU in 64-bit floats with fixed-order reductions and
//! seeded, name-split RNG streams: the same seed and config produce
//! bit-identical checkpoints and loss traces on one platform.

pub mod crf;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod normalize;
pub mod presets;
pub mod pretrain;
pub mod rng;
pub mod synthetic;
pub mod tasks;
pub mod tensor;
pub mod wordpiece;

mod error;

pub use error::{Error, Result};
