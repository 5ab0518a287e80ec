//! Query-by-example over gridded image volumes.
//!
//! Patches of a volume are encoded into 64-bit [`Signature`]s by a small
//! contrastively trained encoder ([`trainer`]). Signatures are persisted in
//! spatial shards ([`store`]) and indexed with multi-index hashing ([`mih`])
//! for sub-linear Hamming search. [`eval`] holds the retrieval evaluation
//! machinery and [`corpus`] the synthetic volumes used to exercise it.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod mih;
pub mod sigcore;
pub mod store;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use mih::{MihIndex, QueryResult};
pub use sigcore::{hamming, PartitionMask, Signature, SignatureRecord, VoxelCoord};
