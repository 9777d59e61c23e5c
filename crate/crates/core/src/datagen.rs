//! Ranking fine-tuning data from two disjoint stores.
//!
//! Every image query in store B is matched against the image records of
//! store A. Candidate sets are k-subsets of its nearest neighbors. A set is
//! kept only when one of its members shares the query's category.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::index::{brute_force_knn, IndexError};
use crate::rank::{build_prompt_from_names, PromptStyle, RankError};
use crate::store::{EmbeddingRecord, MemoryStore, Modality};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("stores do not share a label catalog")]
    CatalogMismatch,
    #[error("dimension mismatch: store A has {a}, store B has {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("store A has {available} image records, pool needs {pool}")]
    PoolTooSmall { pool: usize, available: usize },
    #[error("record id {0} appears in both stores")]
    OverlappingIds(u64),
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetOrder {
    /// Candidate categories by descending neighbor similarity.
    #[default]
    Similarity,
    /// Same, with the query's category moved to the front.
    GroundTruthFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenParams {
    pub pool: usize,
    pub sets_per_query: usize,
    pub k: usize,
    pub seed: u64,
    pub target_order: TargetOrder,
    pub style: PromptStyle,
    /// `{id}` is replaced by the query record id.
    pub image_ref_template: String,
}

impl Default for DatagenParams {
    fn default() -> Self {
        DatagenParams {
            pool: 20,
            sets_per_query: 16,
            k: 5,
            seed: 0,
            target_order: TargetOrder::Similarity,
            style: PromptStyle::Plain,
            image_ref_template: "{id}".into(),
        }
    }
}

impl DatagenParams {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.k == 0 || self.k > self.pool {
            return Err(DatagenError::BadParams(format!("k={} must be in 1..=pool={}", self.k, self.pool)));
        }
        if self.sets_per_query == 0 {
            return Err(DatagenError::BadParams("sets_per_query must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneEntry {
    pub query_id: u64,
    pub image_ref: String,
    pub prompt: String,
    pub shuffled_candidates: Vec<String>,
    pub target_ordering: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatagenStats {
    pub queries: usize,
    pub subsets_sampled: usize,
    /// Subsets passing the category-retention rule, before deduplication.
    pub retained: usize,
    pub duplicates_dropped: usize,
    pub entries: usize,
}

/// Saturating binomial coefficient.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All k-subsets of `0..n` in lexicographic order.
fn all_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// `count` distinct sorted k-subsets of `0..n`, or every subset when there
/// are no more than `count`.
pub fn sample_subsets(n: usize, k: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if binomial(n, k) <= count as u128 {
        return all_subsets(n, k);
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut s = index::sample(rng, n, k).into_vec();
        s.sort_unstable();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// Independent stream per query, so output does not depend on scheduling.
fn query_rng(seed: u64, query_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(query_id);
    rng
}

fn check_stores(a: &MemoryStore, b: &MemoryStore, pool: usize) -> Result<(), DatagenError> {
    if a.catalog() != b.catalog() {
        return Err(DatagenError::CatalogMismatch);
    }
    if a.dimension() != b.dimension() {
        return Err(DatagenError::DimensionMismatch {
            a: a.dimension(),
            b: b.dimension(),
        });
    }
    let ids: HashSet<u64> = a.records().iter().map(|r| r.id).collect();
    if let Some(r) = b.records().iter().find(|r| ids.contains(&r.id)) {
        return Err(DatagenError::OverlappingIds(r.id));
    }
    let available = a.records().iter().filter(|r| r.modality == Modality::Image).count();
    if available < pool {
        return Err(DatagenError::PoolTooSmall { pool, available });
    }
    Ok(())
}

struct QueryOutput {
    entries: Vec<FinetuneEntry>,
    sampled: usize,
    retained: usize,
    dropped: usize,
}

fn entries_for_query(
    a: &MemoryStore,
    query: &EmbeddingRecord,
    params: &DatagenParams,
) -> Result<QueryOutput, DatagenError> {
    let neighbors = brute_force_knn(a, &query.vector, params.pool, Some(Modality::Image))?;
    let labels: Vec<u32> = neighbors
        .neighbors
        .iter()
        .map(|n| a.records()[n.position].label_id)
        .collect();
    let mut rng = query_rng(params.seed, query.id);
    let subsets = sample_subsets(labels.len(), params.k, params.sets_per_query, &mut rng);
    let truth = a.label_name(query).to_string();

    let mut out = QueryOutput {
        entries: Vec::new(),
        sampled: subsets.len(),
        retained: 0,
        dropped: 0,
    };
    let mut seen = HashSet::new();
    for subset in subsets {
        // subset indices are ascending, so this is descending similarity
        let members: Vec<u32> = subset.iter().map(|&i| labels[i]).collect();
        if !members.contains(&query.label_id) {
            continue;
        }
        out.retained += 1;
        let mut multiset = members.clone();
        multiset.sort_unstable();
        if !seen.insert(multiset) {
            out.dropped += 1;
            continue;
        }
        let mut target: Vec<String> = Vec::with_capacity(members.len());
        for &l in &members {
            let name = a.catalog().name(l).expect("shared catalog");
            if !target.iter().any(|t| t == name) {
                target.push(name.to_string());
            }
        }
        if params.target_order == TargetOrder::GroundTruthFirst {
            let pos = target.iter().position(|t| *t == truth).expect("retained subset holds the truth");
            let t = target.remove(pos);
            target.insert(0, t);
        }
        let mut shuffled = target.clone();
        shuffled.shuffle(&mut rng);
        let prompt = build_prompt_from_names(&shuffled, params.style)?;
        out.entries.push(FinetuneEntry {
            query_id: query.id,
            image_ref: params.image_ref_template.replace("{id}", &query.id.to_string()),
            prompt: prompt.text,
            shuffled_candidates: shuffled,
            target_ordering: target,
        });
    }
    Ok(out)
}

pub fn generate_ranking_dataset_with_stats(
    store_a: &MemoryStore,
    store_b: &MemoryStore,
    params: &DatagenParams,
) -> Result<(Vec<FinetuneEntry>, DatagenStats), DatagenError> {
    params.validate()?;
    check_stores(store_a, store_b, params.pool)?;
    let mut queries: Vec<&EmbeddingRecord> = store_b
        .records()
        .iter()
        .filter(|r| r.modality == Modality::Image)
        .collect();
    queries.sort_by_key(|r| r.id);
    let outputs: Vec<QueryOutput> = queries
        .par_iter()
        .map(|q| entries_for_query(store_a, q, params))
        .collect::<Result<_, _>>()?;

    let mut stats = DatagenStats {
        queries: queries.len(),
        ..Default::default()
    };
    let mut entries = Vec::new();
    for o in outputs {
        stats.subsets_sampled += o.sampled;
        stats.retained += o.retained;
        stats.duplicates_dropped += o.dropped;
        entries.extend(o.entries);
    }
    stats.entries = entries.len();
    Ok((entries, stats))
}

pub fn generate_ranking_dataset(
    store_a: &MemoryStore,
    store_b: &MemoryStore,
    params: &DatagenParams,
) -> Result<Vec<FinetuneEntry>, DatagenError> {
    Ok(generate_ranking_dataset_with_stats(store_a, store_b, params)?.0)
}

/// One JSON object per line.
pub fn write_entries<W: Write>(entries: &[FinetuneEntry], mut out: W) -> Result<(), DatagenError> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
