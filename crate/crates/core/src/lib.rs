//! Memory-efficient personalization of diffusion U-Nets by hollowing.
//!
//! LoRA adapters are trained on a *hollowed* view of a frozen U-Net: a
//! contiguous, skip-balanced run of middle sub-blocks is removed and its
//! output is replaced by an activation pre-computed with the full network.
//! The adapters transfer unchanged back onto the full network, where a
//! two-path evaluation reproduces the training-time computation exactly.

pub mod analysis;
pub mod cache;
pub mod error;
pub mod hash;
pub mod hollow;
pub mod inference;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
