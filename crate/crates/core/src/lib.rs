//! Adapting an English↔HRL translation model to a related low-resource
//! language using only monolingual text in that language.
//!
//! The crate is `no_std` with `alloc`: every module is pure computation over
//! in-memory data. File formats that are plain text (corpora, vocabulary,
//! checkpoints) are encoded to and from strings or byte vectors here; the
//! companion binary crate owns the filesystem, configuration and the command
//! line.
//!
//! Modules roughly follow the data flow:
//!
//! * [`corpus`] sentence filtering, vocabulary, tokenization, text formats
//! * [`synthlang`] synthetic En / HRL / LRL language family
//! * [`noise`] shuffle-and-mask corruption for denoising
//! * [`model`] transformer encoder–decoder, critics, decoding
//! * [`objectives`] translation, denoising, backtranslation, Wasserstein losses
//! * [`trainer`] multi-task optimization loops
//! * [`pipeline`] backtranslation synthesis, script bans, iterative training
//! * [`eval`] BLEU, latent probes, script purity, monolingual ablation

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod math;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod synthlang;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
