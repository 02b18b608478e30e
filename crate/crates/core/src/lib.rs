//! Few-shot domain-generalization training for verification embeddings.
//!
//! The crate trains a domain-aggregation embedding network together with
//! domain-specific expert networks using prototypical episodes, assigns
//! pseudo-domain labels by clustering per-layer style statistics, and
//! evaluates verification performance (EER, FRR at fixed FAR, MinDCF) on a
//! seeded synthetic multi-domain dataset.

pub mod clustering;
mod container;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod losses;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use container::Tensor;
pub use error::{Error, Result};
