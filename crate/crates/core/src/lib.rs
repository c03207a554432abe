//! Mask-restricted local clustering, generalized scene memory,
//! similarity-based re-localization and cluster-primed query initialization
//! for monocular 3D detection, built on a small dense-tensor substrate with
//! hand-written backward passes.

pub mod ablation;
pub mod attention;
pub mod clustering;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod memory;
pub mod pipeline;
pub mod query;
pub mod reloc;
pub mod scene;
pub mod suite;
pub mod tensor;

pub use error::{Error, Result};
