//! Post-processing for document-generated LoRA adapters under knowledge
//! conflicts, together with a planted-fact desk model and an evaluation
//! harness.
//!
//! * [`adapter`]: low-rank adapters, layer scores, selective and global boosting.
//! * [`desk`]: synthetic decoder whose facts carry a controllable prior.
//! * [`margin`]: pretrained and adapter margins, dose-response, logistic fits.
//! * [`router`]: conflict-aware routing between standard and strong boost.
//! * [`gate`]: lexical relevance gating.
//! * [`provider`]: generation providers (in-process desk model, HTTP).
//! * [`bench`]: benchmark loading, scoring and statistics.

pub mod adapter;
pub mod adapter_io;
pub mod bench;
pub mod desk;
pub mod error;
pub mod gate;
pub mod margin;
pub mod matrix;
pub mod provider;
pub mod router;

pub use error::{Error, ProviderError, Result};
