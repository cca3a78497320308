//! Multi-domain sequence tagging on one frozen transformer core.
//!
//! A single small encoder ([`encoder::CoreModel`]) is shared by every domain.
//! Each domain owns one adapter ([`adapters::AdapterSet`], LoRA or prefix),
//! and every label scheme owns one classifier head; the
//! [`heads_registry::DomainRegistry`] maps domains to that pair. Training
//! runs in two phases (pooled adapter + head pre-training, then per-domain
//! replica fine-tuning with the head frozen), and a document-level
//! [`router`] picks the domain when it is not known up front.

pub mod adapters;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads_registry;
pub mod rng;
pub mod router;
pub mod tagger;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Label id used for positions that contribute nothing to the loss
/// (the `[CLS]` slot and padding).
pub const IGNORE_INDEX: usize = usize::MAX;
