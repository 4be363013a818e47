//! Desk-scale laboratory for instruction-aware contrastive text-embedding
//! models.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tensor`]), a byte-level bidirectional transformer encoder ([`encoder`]),
//! the InfoNCE loss family ([`loss`]), triplet construction and toy-corpus
//! generation ([`data`]), hard-negative mining ([`mining`]), the two-stage
//! training loop with AdamW and checkpoint merging ([`train`], [`checkpoint`]),
//! and retrieval/classification/STS scoring with Borda-count aggregation
//! ([`eval`]).
//!
//! Everything here is pure computation over in-memory values. File formats,
//! CLI, and parallel drivers live in the companion `emlab` crate. The crate
//! builds without `std` (allocation required); float intrinsics fall back to
//! `libm` in that configuration.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub(crate) mod math;
pub mod mining;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
