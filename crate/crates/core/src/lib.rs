//! Compute-matched comparison of pretraining from scratch against knowledge
//! distillation for small masked-language-model encoders.
//!
//! Everything in this crate is pure computation on in-memory data and builds
//! under `no_std` with `alloc`. File formats, configuration and the CLI live in
//! the `fairkd` crate.
//!
//! * [`tensor`]: dense tensors with reverse-mode autodiff and a finite
//!   difference gradient checker.
//! * [`encoder`]: BERT-style post-norm encoder exposing every activation the
//!   distillation losses consume.
//! * [`distill`]: vanilla soft cross-entropy, TinyBERT layer alignment and
//!   MiniLM attention/value-relation objectives.
//! * [`budget`]: closed-form FLOP model and token allowances under a fixed budget.
//! * [`data`]: vocabulary, synthetic corpora, packing, masking and the budgeted
//!   token stream.
//! * [`train`]: AdamW, the warmup/decay schedule, the pretraining loop and
//!   probe-task finetuning with grid search.
#![no_std]

extern crate alloc;

pub mod budget;
pub mod data;
pub mod distill;
pub mod encoder;
mod error;
mod real;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
