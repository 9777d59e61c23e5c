//! Retrieve-and-rank recognition engine.
//!
//! Embeddings live in a [`store::MemoryStore`], are searched through an
//! [`index::AnnIndex`], turned into category candidates by [`retrieve`], and
//! ordered by a pluggable [`rank::RankerBackend`]. [`datagen`] builds ranking
//! fine-tuning data, [`regions`] prepares detection crops and [`eval`]
//! computes the reported metrics.

mod codec;
pub mod datagen;
pub mod embed;
pub mod eval;
pub mod index;
pub mod rank;
pub mod regions;
pub mod retrieve;
pub mod store;
