//! Query embedding to top-k distinct category candidates.
//!
//! Image-to-image retrieval walks stored image neighbors best-first and keeps
//! the first occurrence of each category, so a category scores its best
//! neighbor's similarity. Image-to-text retrieval ranks one text embedding per
//! category exactly.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::index::{ann_search, brute_force_knn, AnnIndex, IndexError, NeighborList};
use crate::store::{dot, normalize, LabelCatalog, MemoryStore, Modality, StoreError};

pub const DEFAULT_K: usize = 5;
/// k used for the 4-shot few-shot setting.
pub const FOUR_SHOT_K: usize = 4;
pub const DEFAULT_TEMPLATE: &str = "a photo of a {class}";
const EF_RETRIES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum RetrieveError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("text bank is empty")]
    EmptyBank,
    #[error("memory holds no image records")]
    NoImages,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no text embedding for category {0:?}")]
    MissingText(String),
    #[error("{vectors} text embeddings for {names} categories")]
    CountMismatch { names: usize, vectors: usize },
    #[error("more than one text embedding for category {0:?}")]
    DuplicateText(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    ImageToImage,
    ImageToText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub category: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub candidates: Vec<Candidate>,
    pub mode: RetrievalMode,
    pub k: usize,
    /// Set when the memory holds fewer than `k` distinct categories.
    #[serde(default)]
    pub insufficient: bool,
}

impl CandidateList {
    pub fn names(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.category.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.candidates.iter().any(|c| c.category == name)
    }

    pub fn similarity_of(&self, name: &str) -> Option<f64> {
        self.candidates
            .iter()
            .find(|c| c.category == name)
            .map(|c| c.similarity)
    }

    pub fn top(&self) -> Option<&Candidate> {
        self.candidates.first()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Whether `truth` is within the first `k` candidates.
    pub fn hit_at(&self, truth: &str, k: usize) -> bool {
        self.candidates.iter().take(k).any(|c| c.category == truth)
    }
}

/// First occurrence of each category among `neighbors`, best first.
fn distinct_categories(
    store: &MemoryStore,
    neighbors: &NeighborList,
    limit: usize,
) -> Vec<Candidate> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for n in &neighbors.neighbors {
        let record = &store.records()[n.position];
        if record.modality != Modality::Image {
            continue;
        }
        if seen.insert(record.label_id) {
            out.push(Candidate {
                category: store.label_name(record).to_string(),
                similarity: n.similarity,
            });
            if out.len() == limit {
                break;
            }
        }
    }
    out
}

fn check(store: &MemoryStore, query: &[f32], k: usize) -> Result<usize, RetrieveError> {
    if k == 0 {
        return Err(RetrieveError::ZeroK);
    }
    if query.len() != store.dimension() {
        return Err(RetrieveError::DimensionMismatch {
            expected: store.dimension(),
            got: query.len(),
        });
    }
    let available = store.distinct_labels(Some(Modality::Image));
    if available == 0 {
        return Err(RetrieveError::NoImages);
    }
    Ok(available)
}

/// Image-to-image retrieval through the HNSW index.
///
/// When the first beam does not surface `k` distinct categories the beam
/// width doubles, up to four times, before an exact scan is used.
pub fn retrieve_categories_i2i(
    index: &AnnIndex,
    query: &[f32],
    k: usize,
) -> Result<CandidateList, RetrieveError> {
    let store = index.store();
    let available = check(store, query, k)?;
    let target = k.min(available);
    let mut ef = index.params().ef_search.max(k);
    let mut candidates = Vec::new();
    for _ in 0..=EF_RETRIES {
        let neighbors = ann_search(index, query, ef, Some(ef))?;
        candidates = distinct_categories(store, &neighbors, target);
        if candidates.len() >= target || ef >= store.len() {
            break;
        }
        ef *= 2;
    }
    if candidates.len() < target {
        let neighbors = brute_force_knn(store, query, store.len(), Some(Modality::Image))?;
        candidates = distinct_categories(store, &neighbors, target);
    }
    Ok(CandidateList {
        candidates,
        mode: RetrievalMode::ImageToImage,
        k,
        insufficient: available < k,
    })
}

/// Image-to-image retrieval by exhaustive scan, no index.
pub fn retrieve_categories_i2i_exact(
    store: &MemoryStore,
    query: &[f32],
    k: usize,
) -> Result<CandidateList, RetrieveError> {
    let available = check(store, query, k)?;
    let neighbors = brute_force_knn(store, query, store.len(), Some(Modality::Image))?;
    Ok(CandidateList {
        candidates: distinct_categories(store, &neighbors, k.min(available)),
        mode: RetrievalMode::ImageToImage,
        k,
        insufficient: available < k,
    })
}

/// One unit-norm text embedding per category.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    catalog: LabelCatalog,
    vectors: Vec<Vec<f32>>,
    template: String,
    dimension: usize,
}

impl TextBank {
    /// `vectors[i]` embeds `catalog.name(i)`; vectors are normalized here.
    pub fn new(
        catalog: LabelCatalog,
        vectors: Vec<Vec<f32>>,
        template: impl Into<String>,
    ) -> Result<Self, RetrieveError> {
        if catalog.is_empty() {
            return Err(RetrieveError::EmptyBank);
        }
        if vectors.len() < catalog.len() {
            return Err(RetrieveError::MissingText(catalog.names()[vectors.len()].clone()));
        }
        if vectors.len() > catalog.len() {
            return Err(RetrieveError::CountMismatch {
                names: catalog.len(),
                vectors: vectors.len(),
            });
        }
        let dimension = vectors[0].len();
        let vectors = vectors
            .iter()
            .map(|v| {
                if v.len() != dimension {
                    return Err(RetrieveError::DimensionMismatch {
                        expected: dimension,
                        got: v.len(),
                    });
                }
                Ok(normalize(v)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TextBank {
            catalog,
            vectors,
            template: template.into(),
            dimension,
        })
    }

    /// Builds the bank from the text records of a store; every catalog name
    /// needs exactly one.
    pub fn from_store(store: &MemoryStore, template: impl Into<String>) -> Result<Self, RetrieveError> {
        let mut slots: Vec<Option<Vec<f32>>> = vec![None; store.catalog().len()];
        for r in store.records().iter().filter(|r| r.modality == Modality::Text) {
            let slot = &mut slots[r.label_id as usize];
            if slot.is_some() {
                return Err(RetrieveError::DuplicateText(store.label_name(r).to_string()));
            }
            *slot = Some(r.vector.clone());
        }
        let vectors = slots
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    RetrieveError::MissingText(store.catalog().names()[i].clone())
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        TextBank::new(store.catalog().clone(), vectors, template)
    }

    pub fn catalog(&self) -> &LabelCatalog {
        &self.catalog
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, label_id: u32) -> &[f32] {
        &self.vectors[label_id as usize]
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// The text fed to the embedder for `class`.
    pub fn prompt_for(&self, class: &str) -> String {
        render_template(&self.template, class)
    }
}

pub fn render_template(template: &str, class: &str) -> String {
    template.replace("{class}", class)
}

/// Exact image-to-text retrieval. With `k = 1` this is the zero-shot
/// cosine classifier.
pub fn retrieve_categories_i2t(
    bank: &TextBank,
    query: &[f32],
    k: usize,
) -> Result<CandidateList, RetrieveError> {
    if k == 0 {
        return Err(RetrieveError::ZeroK);
    }
    if bank.is_empty() {
        return Err(RetrieveError::EmptyBank);
    }
    if query.len() != bank.dimension {
        return Err(RetrieveError::DimensionMismatch {
            expected: bank.dimension,
            got: query.len(),
        });
    }
    let mut scored: Vec<(usize, f64)> = bank
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (i, dot(query, v)))
        .collect();
    scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(CandidateList {
        candidates: scored
            .into_iter()
            .map(|(i, s)| Candidate {
                category: bank.catalog.names()[i].clone(),
                similarity: s,
            })
            .collect(),
        mode: RetrievalMode::ImageToText,
        k,
        insufficient: bank.len() < k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{build_hnsw, HnswParams};
    use crate::store::StoreBuilder;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn axis(d: usize, i: usize, eps: f32) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v[(i + 1) % d] = eps;
        v
    }

    #[test]
    fn neighbors_are_deduplicated_by_category() {
        // labels in similarity order: A, A, B, C, D, E
        let q = [1.0f32, 0.0];
        let angles = [0.0f32, 0.1, 0.2, 0.3, 0.4, 0.5];
        let labels = ["A", "A", "B", "C", "D", "E"];
        let mut b = StoreBuilder::new();
        for (i, (a, l)) in angles.iter().zip(labels).enumerate() {
            b.push(i as u64, Modality::Image, l, &[a.cos(), a.sin()]).unwrap();
        }
        let store = Arc::new(b.build().unwrap());
        let exact = retrieve_categories_i2i_exact(&store, &q, 5).unwrap();
        assert_eq!(exact.names(), vec!["A", "B", "C", "D", "E"]);
        assert!(!exact.insufficient);
        assert!((exact.candidates[0].similarity - 1.0).abs() < 1e-9);

        let index = build_hnsw(store.clone(), HnswParams::default(), None).unwrap();
        let approx = retrieve_categories_i2i(&index, &q, 5).unwrap();
        assert_eq!(approx.names(), exact.names());
    }

    #[test]
    fn fewer_classes_than_k_is_flagged() {
        let mut b = StoreBuilder::new();
        for i in 0..9u64 {
            b.push(i, Modality::Image, ["x", "y", "z"][i as usize % 3], &axis(4, i as usize % 4, 0.3))
                .unwrap();
        }
        let store = Arc::new(b.build().unwrap());
        let index = build_hnsw(store.clone(), HnswParams::default(), None).unwrap();
        let list = retrieve_categories_i2i(&index, &axis(4, 0, 0.0), 5).unwrap();
        assert_eq!(list.len(), 3);
        assert!(list.insufficient);
        assert_eq!(list.k, 5);
    }

    #[test]
    fn text_records_are_ignored_in_image_mode() {
        let mut b = StoreBuilder::new();
        b.push(1, Modality::Text, "t", &[1.0, 0.0]).unwrap();
        b.push(2, Modality::Image, "i", &[0.0, 1.0]).unwrap();
        let store = b.build().unwrap();
        let list = retrieve_categories_i2i_exact(&store, &[1.0, 0.0], 2).unwrap();
        assert_eq!(list.names(), vec!["i"]);
    }

    fn orthogonal_bank() -> TextBank {
        let catalog = LabelCatalog::new(["c0", "c1", "c2"]).unwrap();
        TextBank::new(catalog, (0..3).map(|i| axis(3, i, 0.0)).collect(), DEFAULT_TEMPLATE).unwrap()
    }

    #[test]
    fn i2t_orthogonal_bank() {
        let bank = orthogonal_bank();
        let list = retrieve_categories_i2t(&bank, &axis(3, 1, 0.0), 3).unwrap();
        assert_eq!(list.names(), vec!["c1", "c0", "c2"]);
        assert_eq!(list.candidates[0].similarity, 1.0);
        assert_eq!(list.candidates[1].similarity, 0.0);
        assert_eq!(list.mode, RetrievalMode::ImageToText);
    }

    #[test]
    fn i2t_identical_vector_first() {
        let bank = orthogonal_bank();
        let q = bank.vector(2).to_vec();
        let list = retrieve_categories_i2t(&bank, &q, 1).unwrap();
        assert_eq!(list.names(), vec!["c2"]);
        assert_eq!(list.candidates[0].similarity, 1.0);
    }

    #[test]
    fn text_bank_from_store() {
        let mut b = StoreBuilder::new();
        b.push(1, Modality::Text, "cat", &[1.0, 0.0]).unwrap();
        b.push(2, Modality::Text, "dog", &[0.0, 1.0]).unwrap();
        let bank = TextBank::from_store(&b.build().unwrap(), DEFAULT_TEMPLATE).unwrap();
        assert_eq!(bank.prompt_for("cat"), "a photo of a cat");
        assert_eq!(bank.len(), 2);

        let mut b = StoreBuilder::new();
        b.push(1, Modality::Text, "cat", &[1.0, 0.0]).unwrap();
        b.push(2, Modality::Image, "dog", &[0.0, 1.0]).unwrap();
        assert!(matches!(
            TextBank::from_store(&b.build().unwrap(), DEFAULT_TEMPLATE),
            Err(RetrieveError::MissingText(n)) if n == "dog"
        ));
    }

    #[test]
    fn errors() {
        let bank = orthogonal_bank();
        assert!(matches!(retrieve_categories_i2t(&bank, &[1.0], 1), Err(RetrieveError::DimensionMismatch { .. })));
        assert!(matches!(retrieve_categories_i2t(&bank, &[1.0, 0.0, 0.0], 0), Err(RetrieveError::ZeroK)));
        assert!(matches!(
            TextBank::new(LabelCatalog::default(), vec![], DEFAULT_TEMPLATE),
            Err(RetrieveError::EmptyBank)
        ));
    }

    proptest! {
        #[test]
        fn i2t_full_k_is_exact_descending_order(
            raw in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 1..12),
            q in prop::collection::vec(-1.0f32..1.0, 6),
        ) {
            prop_assume!(raw.iter().all(|v| crate::store::l2_norm(v) > 1e-3));
            prop_assume!(crate::store::l2_norm(&q) > 1e-3);
            let names: Vec<String> = (0..raw.len()).map(|i| format!("class {i}")).collect();
            let bank = TextBank::new(LabelCatalog::new(names).unwrap(), raw, DEFAULT_TEMPLATE).unwrap();
            let q = normalize(&q).unwrap();
            let list = retrieve_categories_i2t(&bank, &q, bank.len()).unwrap();
            // brute-force argmax oracle
            let mut best = (0usize, f64::NEG_INFINITY);
            for i in 0..bank.len() {
                let s: f64 = q.iter().zip(bank.vector(i as u32)).map(|(a, b)| *a as f64 * *b as f64).sum();
                if s > best.1 { best = (i, s); }
            }
            prop_assert_eq!(&list.candidates[0].category, &format!("class {}", best.0));
            prop_assert_eq!(list.len(), bank.len());
            for w in list.candidates.windows(2) {
                prop_assert!(w[0].similarity >= w[1].similarity);
            }
            let distinct: HashSet<_> = list.names().into_iter().collect();
            prop_assert_eq!(distinct.len(), list.len());
        }
    }
}
