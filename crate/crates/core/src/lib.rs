//! Multimodal note embeddings at desk scale.
//!
//! The crate covers the full pipeline: a deterministic synthetic note corpus
//! with known ground-truth alignment, positive-pair construction with
//! multi-granularity hard-negative mining, a small analytic encoder with
//! nested (prefix) embedding dimensions, contrastive distillation training,
//! group-relative rank tuning on overlap-graded candidate lists, retrieval
//! metrics, and a vector-index serving layer with an online-verify /
//! offline-backcheck simulator.

pub mod encoder;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pairs;
pub mod rl;
pub mod rng;
pub mod serving;
pub mod sft;
pub mod synth;

pub use error::{Error, Result};
