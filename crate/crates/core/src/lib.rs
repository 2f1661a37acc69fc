//! Train a small decoder-only teacher, distill it into smaller students
//! with supervised fine-tuning, word-level KD, sequence-level KD or
//! reverse-KL distillation, and measure how much of the training data each
//! model reproduces verbatim.
//!
//! Modules, bottom up:
//!
//! * [`numerics`]: tensors, reverse-mode autodiff, Adam, gradient checks.
//! * [`model`]: GPT-2 style transformer, cached inference, decoding.
//! * [`data`]: byte tokenizer, JSONL corpora, prompt template, batching.
//! * [`distill`]: the four training regimes.
//! * [`eval`]: memorization audit and ROUGE.
//! * [`harness`]: experiment config, checkpoints, reports.

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod numerics;

pub use data::{Corpus, Example, Tokenizer};
pub use distill::{train, RegimeKind, TrainedModel, TrainingRegime};
pub use error::{Error, Result};
pub use eval::{memorization_fraction, rouge_report, AuditConfig, AuditReport, RougeReport};
pub use harness::{run_experiment, ExperimentConfig, ExperimentOptions, ResultRow};
pub use model::{ModelConfig, Preset, TransformerParams};
pub use numerics::Tensor;
