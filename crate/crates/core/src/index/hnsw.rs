//! Hierarchical navigable small world graph.
//!
//! Nodes are store positions. Each node draws a top layer from
//! `floor(-ln(U) / ln(m))`; it is linked to at most `m` neighbors on upper
//! layers and `2 * m` on layer 0, chosen with the diversity heuristic and
//! topped up from pruned candidates. Graph distance is `1 - cosine` in graph
//! space (the projected space when a projection is present). Every comparison
//! breaks ties by record id, so a fixed seed reproduces the same graph.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_query, neighbor_order, IndexError, Neighbor, NeighborList, Projection};
use crate::store::{dot, MemoryStore};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 200,
            seed: 0,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<(), IndexError> {
        if self.m < 2 {
            return Err(IndexError::BadParams(format!("m = {} (must be >= 2)", self.m)));
        }
        if self.m > u16::MAX as usize / 2 {
            return Err(IndexError::BadParams(format!("m = {} is too large", self.m)));
        }
        if self.ef_construction < self.m {
            return Err(IndexError::BadParams(format!(
                "ef_construction = {} < m = {}",
                self.ef_construction, self.m
            )));
        }
        if self.ef_search == 0 {
            return Err(IndexError::BadParams("ef_search must be >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Cand {
    dist: f32,
    id: u64,
    node: u32,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.id.cmp(&other.id))
    }
}

struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            marks: vec![0; n],
            epoch: 0,
        }
    }

    fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Returns true when `node` was not yet visited in this epoch.
    fn insert(&mut self, node: u32) -> bool {
        let slot = &mut self.marks[node as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

/// Layered adjacency over graph-space vectors.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Graph {
    pub dim: usize,
    pub data: Vec<f32>,
    pub ids: Vec<u64>,
    /// `links[node][layer]`; a node's top layer is `links[node].len() - 1`.
    pub links: Vec<Vec<Vec<u32>>>,
    pub entry: u32,
    pub max_level: usize,
}

impl Graph {
    fn vector(&self, node: u32) -> &[f32] {
        let i = node as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    fn dist_to(&self, q: &[f32], node: u32) -> f32 {
        let v = self.vector(node);
        1.0 - q.iter().zip(v).map(|(a, b)| a * b).sum::<f32>()
    }

    fn cand(&self, q: &[f32], node: u32) -> Cand {
        Cand {
            dist: self.dist_to(q, node),
            id: self.ids[node as usize],
            node,
        }
    }

    /// Beam search on one layer. Returns up to `ef` candidates, nearest first.
    fn search_layer(
        &self,
        q: &[f32],
        entries: &[Cand],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Cand> {
        visited.reset();
        let mut frontier: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.node) {
                frontier.push(Reverse(e));
                best.push(e);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if best.len() >= ef && c > *best.peek().expect("non-empty") {
                break;
            }
            for &nb in &self.links[c.node as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let cn = self.cand(q, nb);
                if best.len() < ef || cn < *best.peek().expect("non-empty") {
                    frontier.push(Reverse(cn));
                    best.push(cn);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Descends from the entry point to layer 0 greedily, then beam-searches layer 0.
    fn search(&self, q: &[f32], ef: usize, visited: &mut Visited) -> Vec<Cand> {
        let mut ep = vec![self.cand(q, self.entry)];
        for layer in (1..=self.max_level).rev() {
            ep = self.search_layer(q, &ep, 1, layer, visited);
        }
        self.search_layer(q, &ep, ef, 0, visited)
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every already kept neighbor, then top up with pruned ones.
    fn select_neighbors(&self, sorted: &[Cand], m: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(m);
        let mut pruned: Vec<u32> = Vec::new();
        for c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.node);
            let diverse = kept.iter().all(|&r| c.dist < self.dist_to(cv, r));
            if diverse {
                kept.push(c.node);
            } else {
                pruned.push(c.node);
            }
        }
        for p in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(p);
        }
        kept
    }

    fn shrink(&mut self, node: u32, layer: usize, cap: usize) {
        let base = self.vector(node).to_vec();
        let mut cands: Vec<Cand> = self.links[node as usize][layer]
            .iter()
            .map(|&nb| self.cand(&base, nb))
            .collect();
        cands.sort_unstable();
        self.links[node as usize][layer] = self.select_neighbors(&cands, cap);
    }

    fn insert(&mut self, node: u32, level: usize, params: &HnswParams, visited: &mut Visited) {
        self.links[node as usize] = vec![Vec::new(); level + 1];
        if node == 0 {
            self.entry = 0;
            self.max_level = level;
            return;
        }
        let q = self.vector(node).to_vec();
        let mut ep = vec![self.cand(&q, self.entry)];
        for layer in (level + 1..=self.max_level).rev() {
            ep = self.search_layer(&q, &ep, 1, layer, visited);
        }
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&q, &ep, params.ef_construction, layer, visited);
            let chosen = self.select_neighbors(&found, params.m);
            let cap = params.max_degree(layer);
            for &nb in &chosen {
                self.links[nb as usize][layer].push(node);
                if self.links[nb as usize][layer].len() > cap {
                    self.shrink(nb, layer, cap);
                }
            }
            self.links[node as usize][layer] = chosen;
            ep = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = node;
        }
    }

    fn reachable_layer0(&self) -> Vec<bool> {
        let mut seen = vec![false; self.ids.len()];
        let mut queue = VecDeque::from([self.entry]);
        seen[self.entry as usize] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.links[u as usize][0] {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    /// Links every node unreachable from the entry point on layer 0 from its
    /// nearest reachable node that still has spare degree.
    fn repair_layer0(&mut self, params: &HnswParams, visited: &mut Visited) {
        let cap = params.max_degree(0);
        loop {
            let seen = self.reachable_layer0();
            let orphans: Vec<u32> = (0..self.ids.len() as u32)
                .filter(|&v| !seen[v as usize])
                .collect();
            if orphans.is_empty() {
                return;
            }
            for v in orphans {
                let q = self.vector(v).to_vec();
                let found = self.search(&q, params.ef_construction, visited);
                let host = found
                    .iter()
                    .map(|c| c.node)
                    .find(|&u| seen[u as usize] && self.links[u as usize][0].len() < cap)
                    .or_else(|| {
                        let mut open: Vec<Cand> = (0..self.ids.len() as u32)
                            .filter(|&u| seen[u as usize] && self.links[u as usize][0].len() < cap)
                            .map(|u| self.cand(&q, u))
                            .collect();
                        open.sort_unstable();
                        open.first().map(|c| c.node)
                    });
                let Some(u) = host else {
                    // Every reachable node is saturated; evict the host's farthest edge.
                    let u = found
                        .iter()
                        .map(|c| c.node)
                        .find(|&u| seen[u as usize])
                        .unwrap_or(self.entry);
                    self.links[u as usize][0].pop();
                    self.links[u as usize][0].push(v);
                    continue;
                };
                if !self.links[u as usize][0].contains(&v) {
                    self.links[u as usize][0].push(v);
                }
                if self.links[v as usize][0].len() < cap && !self.links[v as usize][0].contains(&u) {
                    self.links[v as usize][0].push(u);
                }
            }
        }
    }
}

/// HNSW index over a frozen store.
#[derive(Debug, Clone)]
pub struct AnnIndex {
    pub(crate) params: HnswParams,
    pub(crate) projection: Option<Projection>,
    pub(crate) store: Arc<MemoryStore>,
    pub(crate) graph: Graph,
}

impl PartialEq for AnnIndex {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.projection == other.projection
            && self.graph == other.graph
            && (Arc::ptr_eq(&self.store, &other.store) || self.store == other.store)
    }
}

pub(crate) fn graph_space(store: &MemoryStore, projection: Option<&Projection>) -> (usize, Vec<f32>) {
    match projection {
        Some(p) => (
            p.out_dim(),
            store.records().iter().flat_map(|r| p.apply(&r.vector)).collect(),
        ),
        None => (
            store.dimension(),
            store.records().iter().flat_map(|r| r.vector.iter().copied()).collect(),
        ),
    }
}

/// Builds the graph, inserting records in store order.
pub fn build_hnsw(
    store: Arc<MemoryStore>,
    params: HnswParams,
    projection: Option<Projection>,
) -> Result<AnnIndex, IndexError> {
    params.validate()?;
    if store.is_empty() {
        return Err(IndexError::EmptyStore);
    }
    if let Some(p) = &projection {
        if p.in_dim() != store.dimension() {
            return Err(IndexError::DimensionMismatch {
                expected: store.dimension(),
                got: p.in_dim(),
            });
        }
    }
    let n = store.len();
    let (dim, data) = graph_space(&store, projection.as_ref());
    let mut graph = Graph {
        dim,
        data,
        ids: store.records().iter().map(|r| r.id).collect(),
        links: vec![Vec::new(); n],
        entry: 0,
        max_level: 0,
    };

    let level_mult = 1.0 / (params.m as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut visited = Visited::new(n);
    for node in 0..n as u32 {
        let u: f64 = 1.0 - rng.gen::<f64>();
        let level = ((-u.ln() * level_mult).floor() as usize).min(MAX_LEVEL);
        graph.insert(node, level, &params, &mut visited);
    }
    graph.repair_layer0(&params, &mut visited);

    Ok(AnnIndex {
        params,
        projection,
        store,
        graph,
    })
}

/// Approximate top-k. Collects `max(ef, k)` candidates in graph space and
/// re-scores them with exact full-dimension cosine.
pub fn ann_search(
    index: &AnnIndex,
    query: &[f32],
    k: usize,
    ef: Option<usize>,
) -> Result<NeighborList, IndexError> {
    check_query(&index.store, query, k)?;
    let ef = ef.unwrap_or(index.params.ef_search).max(k).max(1);
    let q = match &index.projection {
        Some(p) => p.apply(query),
        None => query.to_vec(),
    };
    let mut visited = Visited::new(index.graph.ids.len());
    let found = index.graph.search(&q, ef, &mut visited);
    let records = index.store.records();
    let mut neighbors: Vec<Neighbor> = found
        .iter()
        .map(|c| {
            let position = c.node as usize;
            Neighbor {
                position,
                id: c.id,
                similarity: dot(query, &records[position].vector),
            }
        })
        .collect();
    neighbors.sort_unstable_by(neighbor_order);
    neighbors.truncate(k);
    Ok(NeighborList {
        neighbors,
        k,
        exact: false,
    })
}

impl AnnIndex {
    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn projection(&self) -> Option<&Projection> {
        self.projection.as_ref()
    }

    pub fn store(&self) -> &Arc<MemoryStore> {
        &self.store
    }

    pub fn entry_point(&self) -> u64 {
        self.graph.ids[self.graph.entry as usize]
    }

    pub fn layer_count(&self) -> usize {
        self.graph.max_level + 1
    }

    /// Record ids present on `layer`, in store order.
    pub fn layer_nodes(&self, layer: usize) -> Vec<u64> {
        (0..self.graph.ids.len())
            .filter(|&n| self.graph.links[n].len() > layer)
            .map(|n| self.graph.ids[n])
            .collect()
    }

    /// `(record id, neighbor ids)` for every node on `layer`, in store order.
    pub fn adjacency(&self, layer: usize) -> Vec<(u64, Vec<u64>)> {
        (0..self.graph.ids.len())
            .filter(|&n| self.graph.links[n].len() > layer)
            .map(|n| {
                let nbrs = self.graph.links[n][layer]
                    .iter()
                    .map(|&v| self.graph.ids[v as usize])
                    .collect();
                (self.graph.ids[n], nbrs)
            })
            .collect()
    }

    pub fn max_degree(&self, layer: usize) -> usize {
        self.params.max_degree(layer)
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<NeighborList, IndexError> {
        ann_search(self, query, k, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::brute_force_knn;
    use crate::store::{Modality, StoreBuilder};
    use rand_distr::{Distribution, StandardNormal};
    use std::collections::HashSet;

    fn random_store(n: usize, d: usize, seed: u64) -> Arc<MemoryStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = StoreBuilder::new();
        for i in 0..n {
            let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            b.push(i as u64, Modality::Image, &format!("c{}", i % 7), &v).unwrap();
        }
        Arc::new(b.build().unwrap())
    }

    fn check_invariants(index: &AnnIndex) {
        let n = index.store.len();
        assert_eq!(index.layer_nodes(0).len(), n);
        for layer in 0..index.layer_count() {
            for (_, nbrs) in index.adjacency(layer) {
                assert!(nbrs.len() <= index.max_degree(layer));
                assert_eq!(nbrs.iter().collect::<HashSet<_>>().len(), nbrs.len());
            }
        }
        let seen = index.graph.reachable_layer0();
        assert!(seen.iter().all(|&s| s), "layer 0 not connected from entry");
    }

    #[test]
    fn single_record() {
        let store = random_store(1, 8, 1);
        let index = build_hnsw(store.clone(), HnswParams::default(), None).unwrap();
        assert_eq!(index.entry_point(), 0);
        assert_eq!(index.layer_nodes(0), vec![0]);
        let nl = ann_search(&index, &store.records()[0].vector, 3, None).unwrap();
        assert_eq!(nl.ids(), vec![0]);
        assert!(!nl.exact);
    }

    #[test]
    fn tiny_store_ef_one() {
        let store = random_store(2, 4, 3);
        let index = build_hnsw(store.clone(), HnswParams::default(), None).unwrap();
        let nl = ann_search(&index, &store.records()[1].vector, 1, Some(1)).unwrap();
        assert_eq!(nl.len(), 1);
    }

    #[test]
    fn invariants_and_determinism() {
        let store = random_store(2000, 16, 7);
        let params = HnswParams {
            seed: 11,
            ..HnswParams::default()
        };
        let a = build_hnsw(store.clone(), params, None).unwrap();
        let b = build_hnsw(store.clone(), params, None).unwrap();
        check_invariants(&a);
        for layer in 0..a.layer_count() {
            assert_eq!(a.adjacency(layer), b.adjacency(layer));
        }
        assert_eq!(a, b);
    }

    #[test]
    fn small_m_stays_connected() {
        let store = random_store(1500, 8, 5);
        let params = HnswParams {
            m: 2,
            ef_construction: 4,
            ef_search: 8,
            seed: 2,
        };
        let index = build_hnsw(store, params, None).unwrap();
        check_invariants(&index);
    }

    #[test]
    fn similarities_are_exact_with_projection() {
        let store = random_store(800, 90, 9);
        let proj = Projection::random(90, 10, 4).unwrap();
        let index = build_hnsw(store.clone(), HnswParams::default(), Some(proj)).unwrap();
        check_invariants(&index);
        for r in store.records().iter().take(50) {
            let nl = ann_search(&index, &r.vector, 10, None).unwrap();
            for n in &nl.neighbors {
                let exact = dot(&r.vector, &store.records()[n.position].vector);
                assert!((n.similarity - exact).abs() < 1e-6);
            }
            for w in nl.neighbors.windows(2) {
                assert_ne!(neighbor_order(&w[0], &w[1]), Ordering::Greater);
            }
        }
    }

    #[test]
    fn recall_reasonable_on_small_suite() {
        let store = random_store(3000, 32, 21);
        let index = build_hnsw(store.clone(), HnswParams::default(), None).unwrap();
        let queries = random_store(100, 32, 22);
        let mut total = 0.0;
        for q in queries.records() {
            let a = ann_search(&index, &q.vector, 10, None).unwrap();
            let t = brute_force_knn(&store, &q.vector, 10, None).unwrap();
            total += crate::index::recall(&a, &t);
        }
        assert!(total / 100.0 > 0.9, "recall {}", total / 100.0);
    }

    #[test]
    fn bad_params_rejected() {
        let store = random_store(4, 4, 1);
        for p in [
            HnswParams { m: 1, ..Default::default() },
            HnswParams { ef_construction: 8, ..Default::default() },
            HnswParams { ef_search: 0, ..Default::default() },
        ] {
            assert!(matches!(build_hnsw(store.clone(), p, None), Err(IndexError::BadParams(_))));
        }
        let empty = Arc::new(MemoryStore::new(4, Default::default(), vec![]).unwrap());
        assert!(matches!(
            build_hnsw(empty, HnswParams::default(), None),
            Err(IndexError::EmptyStore)
        ));
    }
}
