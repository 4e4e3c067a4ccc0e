//! Desk-scale toolkit for generative biomedical text mining.
//!
//! A GPT-2 style decoder is pretrained on an in-domain corpus with a learned
//! BPE vocabulary, then fine-tuned on text-mining tasks whose labels are
//! rendered as natural-language target sentences. A learned continuous
//! prompt sits between the source document and the target:
//!
//! ```text
//! [ source tokens ][ prompt (virtual tokens) ][ target tokens </s> ]
//!                                            ^ loss only on the target
//! ```
//!
//! Module map:
//!
//! * [`corpus`]: documents, task examples and their JSONL files
//! * [`bpe`]: merge learning, vocabulary, encode/decode
//! * [`model`]: configuration, parameters, forward and backward passes
//! * [`training`]: loss, Adam, schedule, accumulation, checkpoint averaging
//! * [`taskcodec`]: label ↔ target sentence codecs
//! * [`prompt`]: hard and continuous prompts, sequence assembly
//! * [`decode`]: greedy and beam search
//! * [`eval`]: micro-P/R/F1, accuracy, end-to-end evaluation
//! * [`synthbench`]: deterministic synthetic corpora and task datasets
//! * [`pipeline`]: pretrain → fine-tune → evaluate workflows and the ablation grid

pub mod bpe;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod synthbench;
pub mod taskcodec;
pub mod training;

pub use bpe::{learn_bpe, MergeTable, Tokenizer, Vocabulary};
pub use corpus::{DatasetSplit, Document, Label, Task, TaskExample};
pub use decode::{DecodeConfig, Strategy};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use model::{Item, ModelConfig, ModelParams, Scalar, Weights};
pub use prompt::{PromptParams, PromptSpec};
pub use taskcodec::{RelationLexicon, TargetFormat, Triplet};
pub use training::{TrainConfig, TrainMode};
