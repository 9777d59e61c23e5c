//! Embedding memory: records, label catalog, normalization and the on-disk formats.
//!
//! A [`MemoryStore`] is immutable once built. Vectors are L2-normalized at
//! ingestion so cosine similarity is a plain dot product everywhere else.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "RARM" | version u16 = 1 | dimension u32 | record count u64
//! catalog: name count u32, then per name: byte length u16 + UTF-8 bytes
//! records: id u64 | modality u8 (0 = image, 1 = text) | label_id u32 | dimension x f32
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, CodecError};

pub const MEMORY_MAGIC: &[u8; 4] = b"RARM";
pub const MEMORY_VERSION: u16 = 1;
/// magic + version + dimension + record count
pub const MEMORY_HEADER_LEN: usize = 4 + 2 + 4 + 8;

const NORM_EPS: f64 = 1e-12;
/// Tolerance used when validating that stored vectors are unit length.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("cannot normalize an empty vector")]
    EmptyVector,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("store invariant violated: {0}")]
    InvariantViolation(String),
    #[error("bad magic bytes, not a memory file")]
    BadMagic,
    #[error("unsupported memory file version {0}")]
    UnsupportedVersion(u16),
    #[error("memory file truncated")]
    Truncated,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl From<CodecError> for StoreError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Truncated => StoreError::Truncated,
            CodecError::Utf8 => StoreError::InvariantViolation("catalog name is not UTF-8".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub modality: Modality,
    pub label_id: u32,
    pub vector: Vec<f32>,
}

/// Ordered category names; a label id is the position of its name.
///
/// Lookup is by exact string, case and whitespace included.
#[derive(Debug, Clone, Default)]
pub struct LabelCatalog {
    names: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl PartialEq for LabelCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
    }
}

impl LabelCatalog {
    pub fn new<I, S>(names: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut catalog = LabelCatalog::default();
        for name in names {
            let name = name.into();
            if catalog.lookup.contains_key(&name) {
                return Err(StoreError::InvariantViolation(format!(
                    "duplicate catalog name {name:?}"
                )));
            }
            catalog.insert(name)?;
        }
        Ok(catalog)
    }

    fn insert(&mut self, name: String) -> Result<u32, StoreError> {
        if name.is_empty() {
            return Err(StoreError::InvariantViolation("empty catalog name".into()));
        }
        if name.len() > u16::MAX as usize {
            return Err(StoreError::InvariantViolation(format!(
                "catalog name longer than {} bytes",
                u16::MAX
            )));
        }
        let id = self.names.len() as u32;
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    /// Returns the id for `name`, appending it when new.
    pub fn intern(&mut self, name: &str) -> Result<u32, StoreError> {
        match self.lookup.get(name) {
            Some(&id) => Ok(id),
            None => self.insert(name.to_string()),
        }
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Scales `vector` to unit L2 norm.
pub fn normalize(vector: &[f32]) -> Result<Vec<f32>, StoreError> {
    if vector.is_empty() {
        return Err(StoreError::EmptyVector);
    }
    let norm = l2_norm(vector);
    if norm < NORM_EPS {
        return Err(StoreError::ZeroVector);
    }
    Ok(vector.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

pub fn l2_norm(vector: &[f32]) -> f64 {
    vector.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Dot product accumulated in f64. Equals cosine similarity for unit vectors.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// The embedding memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    dimension: usize,
    records: Vec<EmbeddingRecord>,
    catalog: LabelCatalog,
}

impl MemoryStore {
    /// Builds a store from already-normalized records, checking every invariant.
    pub fn new(
        dimension: usize,
        catalog: LabelCatalog,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self, StoreError> {
        let store = MemoryStore {
            dimension,
            records,
            catalog,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.dimension == 0 || self.dimension > u32::MAX as usize {
            return Err(StoreError::InvariantViolation(format!(
                "invalid dimension {}",
                self.dimension
            )));
        }
        let mut ids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.vector.len() != self.dimension {
                return Err(StoreError::InvariantViolation(format!(
                    "record {} has length {}, store dimension is {}",
                    r.id,
                    r.vector.len(),
                    self.dimension
                )));
            }
            if r.label_id as usize >= self.catalog.len() {
                return Err(StoreError::InvariantViolation(format!(
                    "record {} has label_id {} but catalog holds {} names",
                    r.id,
                    r.label_id,
                    self.catalog.len()
                )));
            }
            if !ids.insert(r.id) {
                return Err(StoreError::InvariantViolation(format!(
                    "duplicate record id {}",
                    r.id
                )));
            }
            let norm = l2_norm(&r.vector);
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(StoreError::InvariantViolation(format!(
                    "record {} is not unit-norm (|v| = {norm})",
                    r.id
                )));
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn catalog(&self) -> &LabelCatalog {
        &self.catalog
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_name(&self, record: &EmbeddingRecord) -> &str {
        self.catalog
            .name(record.label_id)
            .expect("label ids are validated at construction")
    }

    /// Number of distinct labels actually used by records of `modality` (all when `None`).
    pub fn distinct_labels(&self, modality: Option<Modality>) -> usize {
        self.records
            .iter()
            .filter(|r| modality.map_or(true, |m| r.modality == m))
            .map(|r| r.label_id)
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let d = self.dimension;
        let mut out = Vec::with_capacity(
            MEMORY_HEADER_LEN + 4 + self.records.len() * (13 + 4 * d),
        );
        out.extend_from_slice(MEMORY_MAGIC);
        out.extend_from_slice(&MEMORY_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.catalog.len() as u32).to_le_bytes());
        for name in self.catalog.names() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&r.id.to_le_bytes());
            out.push(r.modality.to_byte());
            out.extend_from_slice(&r.label_id.to_le_bytes());
            for &x in &r.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut rd = ByteReader::new(bytes);
        if rd.take(4)? != MEMORY_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = rd.u16()?;
        if version != MEMORY_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dimension = rd.u32()? as usize;
        let count = rd.u64()?;
        let name_count = rd.u32()?;
        let mut names = Vec::with_capacity(name_count.min(1 << 16) as usize);
        for _ in 0..name_count {
            let len = rd.u16()? as usize;
            names.push(rd.utf8(len)?.to_string());
        }
        let catalog = LabelCatalog::new(names)?;

        // Guard the allocation against a corrupt count.
        let record_len = 8 + 1 + 4 + 4 * dimension as u64;
        if count.saturating_mul(record_len) > rd.remaining() as u64 {
            return Err(StoreError::Truncated);
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = rd.u64()?;
            let modality_byte = rd.u8()?;
            let modality = Modality::from_byte(modality_byte).ok_or_else(|| {
                StoreError::InvariantViolation(format!("unknown modality byte {modality_byte}"))
            })?;
            let label_id = rd.u32()?;
            let mut vector = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                vector.push(rd.f32()?);
            }
            records.push(EmbeddingRecord {
                id,
                modality,
                label_id,
                vector,
            });
        }
        if rd.remaining() != 0 {
            return Err(StoreError::InvariantViolation(format!(
                "{} trailing bytes after last record",
                rd.remaining()
            )));
        }
        MemoryStore::new(dimension, catalog, records)
    }
}

/// Writes `store` in the binary memory format and returns the byte count.
pub fn write_memory_file(store: &MemoryStore, path: impl AsRef<Path>) -> Result<usize, StoreError> {
    store.validate()?;
    let bytes = store.encode();
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_memory_file(path: impl AsRef<Path>) -> Result<MemoryStore, StoreError> {
    let bytes = fs::read(path)?;
    MemoryStore::decode(&bytes)
}

/// Incremental builder that normalizes raw vectors and interns labels by name.
#[derive(Debug)]
pub struct StoreBuilder {
    dimension: Option<usize>,
    catalog: LabelCatalog,
    records: Vec<EmbeddingRecord>,
    ids: HashSet<u64>,
}

impl StoreBuilder {
    /// A builder whose dimension is fixed by the first pushed vector.
    pub fn new() -> Self {
        StoreBuilder {
            dimension: None,
            catalog: LabelCatalog::default(),
            records: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn with_dimension(dimension: usize) -> Self {
        StoreBuilder {
            dimension: Some(dimension),
            ..StoreBuilder::new()
        }
    }

    /// Seeds the catalog so label ids follow a known order.
    pub fn with_catalog(mut self, catalog: LabelCatalog) -> Self {
        self.catalog = catalog;
        self
    }

    pub fn push(
        &mut self,
        id: u64,
        modality: Modality,
        label: &str,
        vector: &[f32],
    ) -> Result<(), StoreError> {
        let dimension = *self.dimension.get_or_insert(vector.len());
        if vector.len() != dimension {
            return Err(StoreError::DimensionMismatch {
                expected: dimension,
                got: vector.len(),
            });
        }
        if !self.ids.insert(id) {
            return Err(StoreError::InvariantViolation(format!("duplicate record id {id}")));
        }
        let vector = normalize(vector)?;
        let label_id = self.catalog.intern(label)?;
        self.records.push(EmbeddingRecord {
            id,
            modality,
            label_id,
            vector,
        });
        Ok(())
    }

    pub fn build(self) -> Result<MemoryStore, StoreError> {
        let dimension = self.dimension.ok_or_else(|| {
            StoreError::InvariantViolation("store dimension unknown: no vectors pushed".into())
        })?;
        MemoryStore::new(dimension, self.catalog, self.records)
    }
}

impl Default for StoreBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// One line of the text interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterchangeRecord {
    pub id: u64,
    pub modality: Modality,
    pub label: String,
    pub vector: Vec<f32>,
}

/// Reads line-delimited JSON interchange records into a store, normalizing each vector.
/// Blank lines are skipped.
pub fn read_interchange(reader: impl BufRead) -> Result<MemoryStore, StoreError> {
    let mut builder = StoreBuilder::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InterchangeRecord =
            serde_json::from_str(&line).map_err(|e| StoreError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        builder
            .push(rec.id, rec.modality, &rec.label, &rec.vector)
            .map_err(|e| StoreError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
    }
    builder.build()
}

pub fn write_interchange(store: &MemoryStore, mut writer: impl Write) -> Result<(), StoreError> {
    for r in store.records() {
        let rec = InterchangeRecord {
            id: r.id,
            modality: r.modality,
            label: store.label_name(r).to_string(),
            vector: r.vector.clone(),
        };
        serde_json::to_writer(&mut writer, &rec)
            .map_err(|e| StoreError::Io(std::io::Error::other(e)))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_store() -> MemoryStore {
        let mut b = StoreBuilder::new();
        b.push(7, Modality::Image, "cat", &[3.0, 4.0]).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(StoreError::ZeroVector)));
        assert!(matches!(normalize(&[]), Err(StoreError::EmptyVector)));
    }

    #[test]
    fn empty_store_is_header_plus_empty_catalog() {
        let store = MemoryStore::new(4, LabelCatalog::default(), vec![]).unwrap();
        let bytes = store.encode();
        assert_eq!(bytes.len(), MEMORY_HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"RARM");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..10], &4u32.to_le_bytes());
        assert_eq!(&bytes[10..18], &0u64.to_le_bytes());
    }

    #[test]
    fn one_record_byte_count() {
        let store = tiny_store();
        let catalog_block = 4 + 2 + "cat".len();
        assert_eq!(
            store.encode().len(),
            MEMORY_HEADER_LEN + catalog_block + (8 + 1 + 4 + 2 * 4)
        );
    }

    #[test]
    fn label_out_of_range_rejected() {
        let catalog = LabelCatalog::new(["a"]).unwrap();
        let rec = EmbeddingRecord {
            id: 1,
            modality: Modality::Image,
            label_id: 1,
            vector: vec![1.0, 0.0],
        };
        assert!(matches!(
            MemoryStore::new(2, catalog, vec![rec]),
            Err(StoreError::InvariantViolation(_))
        ));
    }

    #[test]
    fn decode_errors() {
        let mut bytes = tiny_store().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MemoryStore::decode(&bad), Err(StoreError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            MemoryStore::decode(&bad),
            Err(StoreError::UnsupportedVersion(9))
        ));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(MemoryStore::decode(&bytes), Err(StoreError::Truncated)));
    }

    #[test]
    fn catalog_rejects_duplicates_and_empty() {
        assert!(LabelCatalog::new(["a", "a"]).is_err());
        assert!(LabelCatalog::new([""]).is_err());
        // case-sensitive identity
        assert!(LabelCatalog::new(["Cat", "cat"]).is_ok());
    }

    #[test]
    fn builder_rejects_dimension_drift_and_duplicate_ids() {
        let mut b = StoreBuilder::new();
        b.push(1, Modality::Image, "a", &[1.0, 0.0]).unwrap();
        assert!(matches!(
            b.push(2, Modality::Image, "a", &[1.0, 0.0, 0.0]),
            Err(StoreError::DimensionMismatch { .. })
        ));
        assert!(b.push(1, Modality::Text, "a", &[0.0, 1.0]).is_err());
    }

    #[test]
    fn interchange_round_trip() {
        let store = tiny_store();
        let mut buf = Vec::new();
        write_interchange(&store, &mut buf).unwrap();
        let back = read_interchange(&buf[..]).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn interchange_reports_line_numbers() {
        let text = "{\"id\":1,\"modality\":\"image\",\"label\":\"a\",\"vector\":[1,0]}\n\nnot json\n";
        match read_interchange(text.as_bytes()) {
            Err(StoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-100.0f32..100.0, 1..64)) {
            prop_assume!(l2_norm(&v) > 1e-3);
            let once = normalize(&v).unwrap();
            let twice = normalize(&once).unwrap();
            prop_assert!((l2_norm(&once) - 1.0).abs() < 1e-6);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn binary_round_trip(
            dim in 1usize..12,
            labels in prop::collection::vec("[a-z ]{1,8}", 1..6),
            raw in prop::collection::vec((any::<u64>(), any::<bool>(), any::<u32>(), prop::collection::vec(-1.0f32..1.0, 12)), 0..40),
        ) {
            let mut b = StoreBuilder::with_dimension(dim);
            let mut catalog = LabelCatalog::default();
            for l in &labels { catalog.intern(l).unwrap(); }
            b = b.with_catalog(catalog.clone());
            for (id, text, label, vec) in raw {
                let v = &vec[..dim];
                if l2_norm(v) < 1e-3 { continue; }
                let modality = if text { Modality::Text } else { Modality::Image };
                let name = catalog.name(label % catalog.len() as u32).unwrap().to_string();
                let _ = b.push(id, modality, &name, v);
            }
            let store = b.build().unwrap();
            let back = MemoryStore::decode(&store.encode()).unwrap();
            prop_assert_eq!(&back, &store);
            for (x, y) in back.records().iter().zip(store.records()) {
                for (a, b) in x.vector.iter().zip(&y.vector) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
