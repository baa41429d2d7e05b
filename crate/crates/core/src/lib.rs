//! Desk-scale clinical language-model pipeline.
//!
//! The crate covers the full path from raw clinical notes to evaluated
//! task models:
//!
//! - [`corpus`]: cleaning, sentence boundary detection, and rule-based
//!   de-identification of raw documents.
//! - [`bpe`]: byte-pair-encoding vocabulary training and encode/decode.
//! - [`tensor`]: a dense-tensor core with reverse-mode autodiff and Adam.
//! - [`encoder`]: a configurable BERT-style bidirectional encoder with
//!   versioned checkpoints.
//! - [`pretrain`]: masked-language-model + sentence-order-prediction
//!   pretraining with validation monitoring and early stopping.
//! - [`parallel`]: Megatron-style tensor (model) parallelism and data
//!   parallelism over an abstract message-passing fabric.
//! - [`tasks`]: fine-tuning heads for concept extraction, relation
//!   extraction, sentence similarity, inference, and question answering.
//! - [`metrics`]: the evaluation measures used by those tasks.
//! - [`fixtures`]: seeded synthetic-data generators for all of the above.

pub mod bpe;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod parallel;
pub mod pretrain;
pub mod tasks;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
