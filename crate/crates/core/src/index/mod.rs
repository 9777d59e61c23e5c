//! Nearest-neighbor search over a [`MemoryStore`].
//!
//! [`brute_force_knn`] is the exact reference. [`AnnIndex`] is an HNSW graph,
//! optionally built over randomly projected (reduced) vectors; every candidate
//! it finds is re-scored against the full-dimension vectors before it is
//! reported, so similarities in a [`NeighborList`] are always exact cosines.

mod hnsw;
mod persist;
mod projection;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::store::{dot, MemoryStore, Modality};

pub use hnsw::{build_hnsw, ann_search, AnnIndex, HnswParams};
pub use persist::{read_index_file, write_index_file, INDEX_MAGIC, INDEX_VERSION};
pub use projection::{fit_projection, Projection};

/// Stores at or below this dimension are indexed without projection.
pub const NO_PROJECTION_MAX_DIM: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("store is empty")]
    EmptyStore,
    #[error("invalid projection dimension {out_dim} for input dimension {in_dim}")]
    BadDim { in_dim: usize, out_dim: usize },
    #[error("invalid HNSW parameters: {0}")]
    BadParams(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, not an index file")]
    BadMagic,
    #[error("unsupported index file version {0}")]
    UnsupportedVersion(u16),
    #[error("index file truncated")]
    Truncated,
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Position of the record in the store.
    #[serde(skip)]
    pub position: usize,
    pub id: u64,
    pub similarity: f64,
}

/// Similarity descending, then record id ascending.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub neighbors: Vec<Neighbor>,
    pub k: usize,
    pub exact: bool,
}

impl NeighborList {
    pub fn ids(&self) -> Vec<u64> {
        self.neighbors.iter().map(|n| n.id).collect()
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

pub(crate) fn check_query(store: &MemoryStore, query: &[f32], k: usize) -> Result<(), IndexError> {
    if query.len() != store.dimension() {
        return Err(IndexError::DimensionMismatch {
            expected: store.dimension(),
            got: query.len(),
        });
    }
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    Ok(())
}

/// Exact top-k by cosine similarity over every record passing `modality`.
pub fn brute_force_knn(
    store: &MemoryStore,
    query: &[f32],
    k: usize,
    modality: Option<Modality>,
) -> Result<NeighborList, IndexError> {
    check_query(store, query, k)?;
    if store.is_empty() {
        return Err(IndexError::EmptyStore);
    }
    let mut all: Vec<Neighbor> = store
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| modality.map_or(true, |m| r.modality == m))
        .map(|(position, r)| Neighbor {
            position,
            id: r.id,
            similarity: dot(query, &r.vector),
        })
        .collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, neighbor_order);
        all.truncate(k);
    }
    all.sort_unstable_by(neighbor_order);
    Ok(NeighborList {
        neighbors: all,
        k,
        exact: true,
    })
}

/// Fraction of `truth` ids that also appear in `found`.
pub fn recall(found: &NeighborList, truth: &NeighborList) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hits = truth
        .neighbors
        .iter()
        .filter(|t| found.neighbors.iter().any(|f| f.id == t.id))
        .count();
    hits as f64 / truth.len() as f64
}
