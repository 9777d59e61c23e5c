//! Index file format (integers little-endian):
//!
//! ```text
//! "RARI" | version u16 = 1
//! params: m u32 | ef_construction u32 | ef_search u32 | seed u64 | projection seed u64
//! projection: flag u8, and when set: out_dim u32 + out_dim x d f32 row-major
//! entry point u64 | layer count u8
//! per layer: node count u64, per node: id u64 | degree u16 | degree x neighbor id u64
//! ```
//!
//! The full-dimension vectors live in the memory file; reading an index
//! needs the store it was built from.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::hnsw::{graph_space, Graph};
use super::{AnnIndex, HnswParams, IndexError, Projection};
use crate::codec::{ByteReader, CodecError};
use crate::store::MemoryStore;

pub const INDEX_MAGIC: &[u8; 4] = b"RARI";
pub const INDEX_VERSION: u16 = 1;

impl From<CodecError> for IndexError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Truncated => IndexError::Truncated,
            CodecError::Utf8 => IndexError::Corrupt("invalid UTF-8".into()),
        }
    }
}

impl AnnIndex {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.ef_construction as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.ef_search as u32).to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        let proj_seed = self.projection.as_ref().map_or(0, |p| p.seed());
        out.extend_from_slice(&proj_seed.to_le_bytes());
        match &self.projection {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                out.extend_from_slice(&(p.out_dim() as u32).to_le_bytes());
                for &x in p.matrix() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let g = &self.graph;
        out.extend_from_slice(&g.ids[g.entry as usize].to_le_bytes());
        out.push((g.max_level + 1) as u8);
        for layer in 0..=g.max_level {
            let nodes: Vec<usize> = (0..g.ids.len()).filter(|&n| g.links[n].len() > layer).collect();
            out.extend_from_slice(&(nodes.len() as u64).to_le_bytes());
            for n in nodes {
                let nbrs = &g.links[n][layer];
                out.extend_from_slice(&g.ids[n].to_le_bytes());
                out.extend_from_slice(&(nbrs.len() as u16).to_le_bytes());
                for &v in nbrs {
                    out.extend_from_slice(&g.ids[v as usize].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], store: Arc<MemoryStore>) -> Result<Self, IndexError> {
        let mut rd = ByteReader::new(bytes);
        if rd.take(4)? != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = rd.u16()?;
        if version != INDEX_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let params = HnswParams {
            m: rd.u32()? as usize,
            ef_construction: rd.u32()? as usize,
            ef_search: rd.u32()? as usize,
            seed: rd.u64()?,
        };
        params.validate()?;
        let proj_seed = rd.u64()?;
        let d = store.dimension();
        let projection = match rd.u8()? {
            0 => None,
            1 => {
                let out_dim = rd.u32()? as usize;
                if out_dim == 0 || out_dim > d {
                    return Err(IndexError::BadDim { in_dim: d, out_dim });
                }
                let mut matrix = Vec::with_capacity(out_dim * d);
                for _ in 0..out_dim * d {
                    matrix.push(rd.f32()?);
                }
                Some(Projection::from_parts(d, out_dim, matrix, proj_seed)?)
            }
            f => return Err(IndexError::Corrupt(format!("projection flag {f}"))),
        };

        let position: HashMap<u64, u32> = store
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id, i as u32))
            .collect();
        let lookup = |id: u64| {
            position
                .get(&id)
                .copied()
                .ok_or_else(|| IndexError::Corrupt(format!("record id {id} not in store")))
        };

        let entry = lookup(rd.u64()?)?;
        let layer_count = rd.u8()? as usize;
        if layer_count == 0 {
            return Err(IndexError::Corrupt("index has no layers".into()));
        }
        let n = store.len();
        let mut links: Vec<Vec<Vec<u32>>> = vec![Vec::new(); n];
        for layer in 0..layer_count {
            let count = rd.u64()?;
            if count > n as u64 {
                return Err(IndexError::Corrupt(format!("layer {layer} has {count} nodes")));
            }
            for _ in 0..count {
                let node = lookup(rd.u64()?)? as usize;
                if links[node].len() != layer {
                    return Err(IndexError::Corrupt(format!(
                        "node {} on layer {layer} is missing from a lower layer or repeated",
                        store.records()[node].id
                    )));
                }
                let degree = rd.u16()? as usize;
                if degree > params.max_degree(layer) {
                    return Err(IndexError::Corrupt(format!("degree {degree} on layer {layer}")));
                }
                let mut nbrs = Vec::with_capacity(degree);
                for _ in 0..degree {
                    nbrs.push(lookup(rd.u64()?)?);
                }
                links[node].push(nbrs);
            }
        }
        if rd.remaining() != 0 {
            return Err(IndexError::Corrupt(format!("{} trailing bytes", rd.remaining())));
        }
        if let Some(missing) = links.iter().position(Vec::is_empty) {
            return Err(IndexError::Corrupt(format!(
                "record {} absent from layer 0",
                store.records()[missing].id
            )));
        }
        let max_level = layer_count - 1;
        if links[entry as usize].len() != layer_count {
            return Err(IndexError::Corrupt("entry point is not on the top layer".into()));
        }
        for (node, per_layer) in links.iter().enumerate() {
            for (layer, nbrs) in per_layer.iter().enumerate() {
                if nbrs.iter().any(|&v| links[v as usize].len() <= layer) {
                    return Err(IndexError::Corrupt(format!(
                        "node {} links to a node absent from layer {layer}",
                        store.records()[node].id
                    )));
                }
            }
        }

        let (dim, data) = graph_space(&store, projection.as_ref());
        let graph = Graph {
            dim,
            data,
            ids: store.records().iter().map(|r| r.id).collect(),
            links,
            entry,
            max_level,
        };
        Ok(AnnIndex {
            params,
            projection,
            store,
            graph,
        })
    }
}

pub fn write_index_file(index: &AnnIndex, path: impl AsRef<Path>) -> Result<usize, IndexError> {
    let bytes = index.encode();
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_index_file(path: impl AsRef<Path>, store: Arc<MemoryStore>) -> Result<AnnIndex, IndexError> {
    let bytes = fs::read(path)?;
    AnnIndex::decode(&bytes, store)
}
