//! Self-reviewing fine-tuning for document-image machine translation.
//!
//! The crate covers the whole loop at desk scale: dataset manifests
//! ([`corpus`]), a model contract with a bundled toy multimodal decoder and
//! low-rank adapters ([`modelkit`]), self-review data construction
//! ([`pipeline`]), masked-NLL fine-tuning ([`training`]), evaluation measures
//! ([`metrics`]), synthetic-data augmentation ([`augment`]) and experiment
//! protocols ([`harness`]), plus the `ssr` command line ([`cli`]).

pub mod augment;
pub mod cli;
pub mod corpus;
pub mod error;
mod fsutil;
pub mod glyph;
pub mod harness;
pub mod metrics;
pub mod modelkit;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
