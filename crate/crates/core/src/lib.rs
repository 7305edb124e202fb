//! Schema-composed soft prompts for multi-task encoder-decoder training.
//!
//! Each task is described by a [`schema::TaskSchema`]. The
//! [`compose`](mod@compose) module turns an instance into a sequence of
//! learnable prompt slots (key prompts per component type, value prompts for
//! format, task and output) interleaved with tokenized text. The
//! [`harness`] trains a small encoder-decoder on a capped multi-task mixture
//! and adapts it to held-out tasks; [`eval`] scores it.

pub mod cli;
pub mod compose;
pub mod container;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod harness;
pub mod ingest;
pub mod nn;
pub mod par;
pub mod prompts;
pub mod schema;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
