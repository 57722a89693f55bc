//! # cadenza
//!
//! Multi-task music captioning built around three frozen/trainable parts:
//!
//! 1. a frozen audio encoder producing layered embeddings `[L, T', D]`,
//! 2. a trainable multi-task projector that turns those embeddings into
//!    continuous "content" and "feature" tokens in a language model's
//!    embedding space, and
//! 3. a frozen autoregressive language model that consumes the projected
//!    tokens (plus a textual query) and decodes a caption.
//!
//! Only the projector trains; the encoder and LM stay bit-identical across
//! any number of optimization steps. Long-form audio is captioned by
//! chunking it into fixed-length clips, captioning each, and handing the
//! chronological clip captions to an external chat LLM through a curated
//! prompt. Caption quality is scored with n-gram metrics plus LLM-judged
//! music-feature match accuracies.
//!
//! Desk-scale stand-ins (a spectral toy encoder, a tiny frozen transformer
//! LM, echo/static chat clients) make the whole pipeline testable without
//! checkpoints or network access.

pub mod audio;
pub mod autodiff;
pub mod chaining;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod projector;
pub mod training;

pub use error::{Error, Result};
