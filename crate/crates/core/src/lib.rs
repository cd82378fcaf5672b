//! Hierarchical prompt tuning for dual-encoder vision-language models.
//!
//! The crate is organized around a small set of subsystems:
//!
//! * [`numerics`]: dense `f64` tensors with a reverse-mode gradient tape,
//!   finite-difference gradient checking, and SGD.
//! * [`corpus`]: the knowledge-bundle data contract (descriptions plus
//!   entity/attribute graphs per category), a deterministic word-level
//!   tokenizer, instruction-template rendering, and a seeded synthetic
//!   corpus generator.
//! * [`encoder`]: toy transformer encoders: a frozen text encoder, a frozen
//!   image encoder, a visually prompted image encoder, and the bias-capable
//!   attention layer they share.
//! * [`hierarchy`]: hierarchical prompt assembly (low / high / global) and
//!   the relationship-guided attention bias over low-level tokens.
//! * [`dualpath`]: the dual-path asymmetric training framework producing
//!   the `p_i`, `p_t`, `p_o` class distributions, the training loop, and
//!   the versioned checkpoint container.
//! * [`harness`]: base-to-new and cross-dataset evaluation protocols with
//!   machine-readable reports.

pub mod corpus;
pub mod dualpath;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod numerics;

pub use error::{Error, Result};
