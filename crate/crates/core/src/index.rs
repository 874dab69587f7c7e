//! Exact cosine top-k index over embedded chunks.
//!
//! Queries are a linear scan; results are the exact top-k by cosine, ties
//! broken by ascending entry id. Readers and the writer are separated by a
//! reader–writer lock, so a query never observes a partially applied upsert.
//!
//! # Snapshot layout
//!
//! All integers little-endian, strings as `u32` byte length + UTF-8 bytes.
//!
//! ```text
//! magic           8 bytes  "PEVINDEX"
//! format_version  u32      (currently 1)
//! dimension       u32
//! count           u64
//! count × entry:
//!   entry_id      string
//!   provider_id   string
//!   post_id       string
//!   chunk_seq     u64
//!   cluster_id    i64      (-1 when unassigned)
//!   extra_count   u32, then extra_count × (key string, value string)
//!   vector        dimension × f64
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, Embedding, EmbeddingError};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"PEVINDEX";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch for `{entry_id}`: index is {expected}-d, vector is {actual}-d")]
    DimensionMismatch {
        entry_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("unknown entry id `{0}`")]
    UnknownEntry(String),
    #[error("duplicate entry id `{0}` within one upsert batch")]
    DuplicateInBatch(String),
    #[error("snapshot I/O: {0}")]
    Io(#[from] io::Error),
    #[error("invalid snapshot: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMetadata {
    pub post_id: String,
    pub chunk_seq: usize,
    pub cluster_id: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl EntryMetadata {
    pub fn new(post_id: impl Into<String>, chunk_seq: usize) -> Self {
        Self {
            post_id: post_id.into(),
            chunk_seq,
            cluster_id: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_cluster(mut self, cluster_id: usize) -> Self {
        self.cluster_id = Some(cluster_id);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub entry_id: String,
    pub vector: Embedding,
    pub metadata: EntryMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub entry_id: String,
    pub score: f64,
    pub metadata: EntryMetadata,
}

/// Conjunction of metadata equality constraints; empty matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataFilter {
    pub cluster_id: Option<usize>,
    pub post_id: Option<String>,
}

impl MetadataFilter {
    pub fn cluster(cluster_id: usize) -> Self {
        Self {
            cluster_id: Some(cluster_id),
            ..Self::default()
        }
    }

    pub fn matches(&self, meta: &EntryMetadata) -> bool {
        self.cluster_id.is_none_or(|c| meta.cluster_id == Some(c))
            && self.post_id.as_ref().is_none_or(|p| &meta.post_id == p)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpsertCounts {
    pub inserted: usize,
    pub updated: usize,
}

#[derive(Debug, Default)]
struct Inner {
    entries: Vec<IndexEntry>,
    positions: HashMap<String, usize>,
}

#[derive(Debug)]
pub struct VectorIndex {
    dimension: usize,
    inner: RwLock<Inner>,
}

/// Ranking used by [`VectorIndex::query`]: score descending, then id ascending.
pub fn hit_order(a: (f64, &str), b: (f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl VectorIndex {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            inner: RwLock::new(Inner::default()),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.inner.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts new ids and replaces existing ones. The batch is validated in
    /// full before any entry is applied.
    pub fn upsert(&self, entries: Vec<IndexEntry>) -> Result<UpsertCounts, IndexError> {
        let mut batch_ids = BTreeSet::new();
        for e in &entries {
            if e.vector.dimension() != self.dimension {
                return Err(IndexError::DimensionMismatch {
                    entry_id: e.entry_id.clone(),
                    expected: self.dimension,
                    actual: e.vector.dimension(),
                });
            }
            if !batch_ids.insert(e.entry_id.as_str()) {
                return Err(IndexError::DuplicateInBatch(e.entry_id.clone()));
            }
        }

        let mut inner = self.inner.write();
        let mut counts = UpsertCounts::default();
        for entry in entries {
            match inner.positions.get(&entry.entry_id) {
                Some(&pos) => {
                    inner.entries[pos] = entry;
                    counts.updated += 1;
                }
                None => {
                    let pos = inner.entries.len();
                    inner.positions.insert(entry.entry_id.clone(), pos);
                    inner.entries.push(entry);
                    counts.inserted += 1;
                }
            }
        }
        Ok(counts)
    }

    /// Exact top-`top_k` entries passing `filter`.
    pub fn query(
        &self,
        vector: &Embedding,
        top_k: usize,
        filter: Option<&MetadataFilter>,
    ) -> Result<Vec<QueryHit>, IndexError> {
        if top_k == 0 {
            return Err(IndexError::InvalidTopK);
        }
        if vector.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                entry_id: "<query>".into(),
                expected: self.dimension,
                actual: vector.dimension(),
            });
        }
        let inner = self.inner.read();
        let mut scored: Vec<(f64, usize)> = inner
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| filter.is_none_or(|f| f.matches(&e.metadata)))
            .map(|(i, e)| (dot(vector.values(), e.vector.values()).clamp(-1.0, 1.0), i))
            .collect();

        let order = |a: &(f64, usize), b: &(f64, usize)| {
            hit_order(
                (a.0, &inner.entries[a.1].entry_id),
                (b.0, &inner.entries[b.1].entry_id),
            )
        };
        if scored.len() > top_k {
            scored.select_nth_unstable_by(top_k - 1, order);
            scored.truncate(top_k);
        }
        scored.sort_by(order);

        Ok(scored
            .into_iter()
            .map(|(score, i)| {
                let e = &inner.entries[i];
                QueryHit {
                    entry_id: e.entry_id.clone(),
                    score,
                    metadata: e.metadata.clone(),
                }
            })
            .collect())
    }

    pub fn get(&self, entry_id: &str) -> Option<IndexEntry> {
        let inner = self.inner.read();
        inner.positions.get(entry_id).map(|&p| inner.entries[p].clone())
    }

    /// All entries in insertion order.
    pub fn entries(&self) -> Vec<IndexEntry> {
        self.inner.read().entries.clone()
    }

    /// Sets `cluster_id` for every listed entry; unknown ids fail the whole call.
    pub fn assign_clusters(&self, assignments: &BTreeMap<String, usize>) -> Result<usize, IndexError> {
        let mut inner = self.inner.write();
        if let Some(missing) = assignments.keys().find(|id| !inner.positions.contains_key(*id)) {
            return Err(IndexError::UnknownEntry(missing.clone()));
        }
        for (id, &cluster) in assignments {
            let pos = inner.positions[id];
            inner.entries[pos].metadata.cluster_id = Some(cluster);
        }
        Ok(assignments.len())
    }

    /// Number of entries per assigned cluster id.
    pub fn cluster_sizes(&self) -> BTreeMap<usize, usize> {
        let mut sizes = BTreeMap::new();
        for e in &self.inner.read().entries {
            if let Some(c) = e.metadata.cluster_id {
                *sizes.entry(c).or_insert(0) += 1;
            }
        }
        sizes
    }

    pub fn write_snapshot(&self, writer: impl Write) -> Result<(), IndexError> {
        let inner = self.inner.read();
        let mut w = BufWriter::new(writer);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dimension as u32).to_le_bytes())?;
        w.write_all(&(inner.entries.len() as u64).to_le_bytes())?;
        for e in &inner.entries {
            write_str(&mut w, &e.entry_id)?;
            write_str(&mut w, e.vector.provider_id())?;
            write_str(&mut w, &e.metadata.post_id)?;
            w.write_all(&(e.metadata.chunk_seq as u64).to_le_bytes())?;
            let cluster = e.metadata.cluster_id.map_or(-1, |c| c as i64);
            w.write_all(&cluster.to_le_bytes())?;
            w.write_all(&(e.metadata.extra.len() as u32).to_le_bytes())?;
            for (k, v) in &e.metadata.extra {
                write_str(&mut w, k)?;
                write_str(&mut w, v)?;
            }
            for v in e.vector.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot(reader: impl Read) -> Result<Self, IndexError> {
        let mut r = BufReader::new(reader);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(IndexError::Corrupt(format!("unsupported format version {version}")));
        }
        let dimension = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)?;
        let mut entries = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            let entry_id = read_str(&mut r)?;
            let provider_id = read_str(&mut r)?;
            let post_id = read_str(&mut r)?;
            let chunk_seq = read_u64(&mut r)? as usize;
            let cluster = read_u64(&mut r)? as i64;
            let extra_count = read_u32(&mut r)?;
            let mut extra = BTreeMap::new();
            for _ in 0..extra_count {
                let k = read_str(&mut r)?;
                extra.insert(k, read_str(&mut r)?);
            }
            let mut values = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                values.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            entries.push(IndexEntry {
                entry_id,
                vector: Embedding::from_unit(values, provider_id)?,
                metadata: EntryMetadata {
                    post_id,
                    chunk_seq,
                    cluster_id: (cluster >= 0).then_some(cluster as usize),
                    extra,
                },
            });
        }
        let index = Self::new(dimension);
        index.upsert(entries)?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        self.write_snapshot(fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::read_snapshot(fs::File::open(path)?)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    read_array(r).map(u32::from_le_bytes)
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

fn read_str(r: &mut impl Read) -> Result<String, IndexError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| IndexError::Corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(values: &[f64]) -> Embedding {
        Embedding::normalized(values.to_vec(), "t").unwrap()
    }

    fn entry(id: &str, values: &[f64], cluster: Option<usize>) -> IndexEntry {
        let mut metadata = EntryMetadata::new(id, 0);
        metadata.cluster_id = cluster;
        IndexEntry {
            entry_id: id.into(),
            vector: emb(values),
            metadata,
        }
    }

    #[test]
    fn upsert_replaces_by_id() {
        let idx = VectorIndex::new(2);
        let c = idx
            .upsert(vec![entry("a", &[1.0, 0.0], None), entry("b", &[0.0, 1.0], None), entry("c", &[1.0, 1.0], None)])
            .unwrap();
        assert_eq!(c, UpsertCounts { inserted: 3, updated: 0 });
        let c = idx.upsert(vec![entry("b", &[1.0, 0.0], Some(4))]).unwrap();
        assert_eq!(c, UpsertCounts { inserted: 0, updated: 1 });
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.get("b").unwrap().metadata.cluster_id, Some(4));
    }

    #[test]
    fn self_retrieval() {
        let idx = VectorIndex::new(3);
        idx.upsert(vec![entry("x", &[0.2, 0.5, 0.1], None), entry("y", &[1.0, 0.0, 0.0], None)])
            .unwrap();
        let hits = idx.query(&emb(&[0.2, 0.5, 0.1]), 1, None).unwrap();
        assert_eq!(hits[0].entry_id, "x");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn picks_higher_cosine() {
        // Query (1,0); entries at cosine 0.9 and 0.1.
        let idx = VectorIndex::new(2);
        let s = |c: f64| [c, (1.0 - c * c).sqrt()];
        idx.upsert(vec![entry("lo", &s(0.1), None), entry("hi", &s(0.9), None)]).unwrap();
        let hits = idx.query(&emb(&[1.0, 0.0]), 1, None).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entry_id, "hi");
        assert!((hits[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = VectorIndex::new(2);
        idx.upsert(vec![entry("b", &[1.0, 0.0], None), entry("a", &[1.0, 0.0], None)]).unwrap();
        let hits = idx.query(&emb(&[1.0, 0.0]), 2, None).unwrap();
        assert_eq!(hits[0].entry_id, "a");
        assert_eq!(hits[1].entry_id, "b");
    }

    #[test]
    fn filter_and_errors() {
        let idx = VectorIndex::new(2);
        assert!(idx.query(&emb(&[1.0, 0.0]), 3, None).unwrap().is_empty());
        idx.upsert(vec![
            entry("a", &[1.0, 0.0], Some(1)),
            entry("b", &[0.9, 0.1], Some(2)),
            entry("c", &[0.0, 1.0], Some(2)),
        ])
        .unwrap();
        let hits = idx.query(&emb(&[1.0, 0.0]), 5, Some(&MetadataFilter::cluster(2))).unwrap();
        assert_eq!(hits.len(), 2);
        assert!(hits.iter().all(|h| h.metadata.cluster_id == Some(2)));
        assert!(matches!(idx.query(&emb(&[1.0, 0.0]), 0, None), Err(IndexError::InvalidTopK)));
        assert!(matches!(
            idx.query(&emb(&[1.0, 0.0, 0.0]), 1, None),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            idx.upsert(vec![entry("d", &[1.0, 0.0, 0.0], None)]),
            Err(IndexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let idx = VectorIndex::new(3);
        let mut e = entry("p#0", &[0.3, -0.2, 0.9], Some(2));
        e.metadata.extra.insert("submolt".into(), "general".into());
        idx.upsert(vec![e, entry("p#1", &[0.1, 0.1, 0.1], None)]).unwrap();
        let mut bytes = Vec::new();
        idx.write_snapshot(&mut bytes).unwrap();
        let back = VectorIndex::read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(back.entries(), idx.entries());
        let mut again = Vec::new();
        back.write_snapshot(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(VectorIndex::read_snapshot(&b"NOTANIDX0000"[..]).is_err());
    }

    #[test]
    fn unknown_assignment_rejected_atomically() {
        let idx = VectorIndex::new(2);
        idx.upsert(vec![entry("a", &[1.0, 0.0], None)]).unwrap();
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), 0);
        m.insert("zz".to_string(), 1);
        match idx.assign_clusters(&m) {
            Err(IndexError::UnknownEntry(id)) => assert_eq!(id, "zz"),
            other => panic!("{other:?}"),
        }
        assert_eq!(idx.get("a").unwrap().metadata.cluster_id, None);
    }
}
