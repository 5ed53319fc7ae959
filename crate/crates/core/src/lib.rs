//! Uncertainty-aware semi-supervised patch classification: evidential
//! Dirichlet heads, a contrastive pretrain / fine-tune / distill pipeline,
//! uncertainty-driven label acquisition and double-tier attention MIL.

pub mod data;
pub mod error;
pub mod evidential;
pub mod mil;
pub mod model;
pub mod report;
pub mod rng;
pub mod sslpipe;
pub mod ualoop;

pub use error::{Error, Result};
