//! Question-aware video frame selection.
//!
//! Densely sampled candidate frames are scored by a small score-query
//! transformer, the most informative ones are picked with Greedy-NMS, and the
//! scorer is trained from spatial and temporal pseudo-labels produced by
//! pluggable chat backends.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod frame_model;
pub mod pipeline;
pub mod pseudo_label;
pub mod selection;
pub mod selector;
pub mod store;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;

/// FNV-1a, for cheap deterministic per-item seeds.
pub(crate) fn hash64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
