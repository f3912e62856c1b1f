//! Embeddings, contextual embeddings and the persistent similarity index.
//!
//! [`VectorIndex`] always supports exact search. An optional
//! [`SmallWorldGraph`] can be built for approximate search; its results are
//! re-scored exactly and are always a subset of the stored ids.
//!
//! # File format
//!
//! Little-endian throughout:
//!
//! ```text
//! magic     8 bytes  "VCTXIDX\0"
//! version   u32
//! dim       u32
//! count     u64
//! payload   entries, then the optional graph section
//! crc32     u32      over the payload bytes
//! ```
//!
//! Each entry is `id_len u32, id, meta_len u32, meta, dim x f32`. The graph
//! section starts with a presence byte; when present it holds the graph
//! parameters, entry point, max level and per-node adjacency lists.

mod context;
mod embed;
mod hnsw;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::Deserialize;

pub use context::{contextual_embedding, contextual_embeddings, global_embedding, ContextWindowConfig};
pub use embed::{Embedder, EmbeddingVector, HashingEmbedder, DEFAULT_DIM};
pub use hnsw::{GraphParams, SmallWorldGraph};

pub const INDEX_MAGIC: [u8; 8] = *b"VCTXIDX\0";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum error: {0}")]
    Checksum(String),
    #[error("malformed index payload: {0}")]
    Malformed(String),
    #[error("external embeddings line {line}: {message}")]
    External { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Search strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchMode {
    #[default]
    Exact,
    /// Graph search with the given beam width; falls back to exact when no
    /// graph has been built.
    Approximate { ef: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub id: String,
    /// Position of the entry in the index.
    pub slot: usize,
    pub cosine: f64,
}

/// Id-addressed store of unit vectors with opaque per-entry metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    metas: Vec<Vec<u8>>,
    data: Vec<f32>,
    lookup: HashMap<String, usize>,
    graph: Option<SmallWorldGraph>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            metas: Vec::new(),
            data: Vec::new(),
            lookup: HashMap::new(),
            graph: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn version(&self) -> u32 {
        INDEX_VERSION
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn slot_of(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn vector(&self, slot: usize) -> &[f32] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn meta(&self, slot: usize) -> &[u8] {
        &self.metas[slot]
    }

    pub fn graph(&self) -> Option<&SmallWorldGraph> {
        self.graph.as_ref()
    }

    /// Adds an entry. Any previously built graph is discarded.
    pub fn insert(&mut self, id: impl Into<String>, vector: &EmbeddingVector, meta: Vec<u8>) -> Result<(), IndexError> {
        let id = id.into();
        if vector.dim() != self.dim {
            return Err(IndexError::Dimension { expected: self.dim, found: vector.dim() });
        }
        if self.lookup.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        self.lookup.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.metas.push(meta);
        self.data.extend_from_slice(vector.as_slice());
        self.graph = None;
        Ok(())
    }

    pub fn build_graph(&mut self, params: GraphParams) {
        self.graph = Some(SmallWorldGraph::build(&self.data, self.dim, params));
    }

    /// Exact top-`k` by cosine, descending, ties by id.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        self.search_with(query, k, SearchMode::Exact)
    }

    pub fn search_with(&self, query: &EmbeddingVector, k: usize, mode: SearchMode) -> Result<Vec<SearchHit>, IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::Dimension { expected: self.dim, found: query.dim() });
        }
        if self.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let q = query.as_slice();
        let slots: Vec<usize> = match (mode, &self.graph) {
            (SearchMode::Approximate { ef }, Some(g)) => g
                .search(&self.data, self.dim, q, k, ef)
                .into_iter()
                .map(|n| n as usize)
                .collect(),
            _ => (0..self.len()).collect(),
        };
        let mut hits: Vec<SearchHit> = slots
            .into_iter()
            .map(|slot| SearchHit {
                id: self.ids[slot].clone(),
                slot,
                cosine: embed::cosine(q, self.vector(slot)),
            })
            .collect();
        sort_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.data.len() * 4 + self.ids.len() * 32);
        for slot in 0..self.len() {
            put_bytes(&mut payload, self.ids[slot].as_bytes());
            put_bytes(&mut payload, &self.metas[slot]);
            for v in self.vector(slot) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.graph {
            None => payload.push(0),
            Some(g) => {
                payload.push(1);
                put_u32(&mut payload, g.params.m as u32);
                put_u32(&mut payload, g.params.ef_construction as u32);
                put_u32(&mut payload, g.params.ef_search as u32);
                payload.extend_from_slice(&g.params.seed.to_le_bytes());
                put_u32(&mut payload, g.entry.map_or(u32::MAX, |e| e));
                put_u32(&mut payload, g.max_level as u32);
                for node in &g.layers {
                    put_u32(&mut payload, node.len() as u32);
                    for list in node {
                        put_u32(&mut payload, list.len() as u32);
                        for n in list {
                            put_u32(&mut payload, *n);
                        }
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
        out.extend_from_slice(&INDEX_MAGIC);
        put_u32(&mut out, INDEX_VERSION);
        put_u32(&mut out, self.dim as u32);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        put_u32(&mut out, crc32fast::hash(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < 8 {
            return Err(IndexError::Checksum("file too short for header".into()));
        }
        if bytes[..8] != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(IndexError::Checksum("file too short for header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != INDEX_VERSION {
            return Err(IndexError::VersionMismatch { found: version, expected: INDEX_VERSION });
        }
        let dim = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let payload = &bytes[HEADER_LEN..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(IndexError::Checksum(format!("stored {stored:#010x}, computed {actual:#010x}")));
        }

        let mut r = Cursor { buf: payload, pos: 0 };
        let mut index = Self::new(dim);
        index.data.reserve(count * dim);
        for _ in 0..count {
            let id = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| IndexError::Malformed("id is not utf-8".into()))?;
            let meta = r.bytes()?.to_vec();
            let raw = r.take(dim * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            index.insert(id, &EmbeddingVector::from_raw(values), meta)?;
        }
        if r.take(1)?[0] == 1 {
            let params = GraphParams {
                m: r.u32()? as usize,
                ef_construction: r.u32()? as usize,
                ef_search: r.u32()? as usize,
                seed: u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
            };
            let entry = match r.u32()? {
                u32::MAX => None,
                e => Some(e),
            };
            let max_level = r.u32()? as usize;
            let mut layers = Vec::with_capacity(count);
            for _ in 0..count {
                let levels = r.u32()? as usize;
                let mut node = Vec::with_capacity(levels);
                for _ in 0..levels {
                    let n = r.u32()? as usize;
                    let mut list = Vec::with_capacity(n);
                    for _ in 0..n {
                        let v = r.u32()?;
                        if v as usize >= count {
                            return Err(IndexError::Malformed(format!("neighbour {v} out of range")));
                        }
                        list.push(v);
                    }
                    node.push(list);
                }
                layers.push(node);
            }
            index.graph = Some(SmallWorldGraph { params, entry, max_level, layers });
        }
        if r.pos != payload.len() {
            return Err(IndexError::Malformed("trailing bytes after payload".into()));
        }
        Ok(index)
    }
}

pub(crate) fn sort_hits(hits: &mut [SearchHit]) {
    hits.sort_by(|a, b| b.cosine.total_cmp(&a.cosine).then_with(|| a.id.cmp(&b.id)));
}

pub fn save_index(index: &VectorIndex, path: impl AsRef<Path>) -> Result<(), IndexError> {
    fs::write(path, index.to_bytes())?;
    Ok(())
}

/// Loads an index; nothing is returned unless the whole file verifies.
pub fn load_index(path: impl AsRef<Path>) -> Result<VectorIndex, IndexError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    VectorIndex::from_bytes(&bytes)
}

#[derive(Deserialize)]
struct ExternalRecord {
    id: String,
    vec: Vec<f32>,
}

/// Reads `{"id": str, "vec": [float...]}` lines. Vectors are normalised;
/// all must share one dimension.
pub fn read_external_embeddings<R: BufRead>(reader: R) -> Result<Vec<(String, EmbeddingVector)>, IndexError> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExternalRecord = serde_json::from_str(&line)
            .map_err(|e| IndexError::External { line: i + 1, message: e.to_string() })?;
        let d = *dim.get_or_insert(rec.vec.len());
        if rec.vec.len() != d {
            return Err(IndexError::External {
                line: i + 1,
                message: format!("dimension {} differs from {d}", rec.vec.len()),
            });
        }
        out.push((rec.id, EmbeddingVector::normalized(rec.vec)));
    }
    Ok(out)
}

pub fn load_external_embeddings(path: impl AsRef<Path>) -> Result<Vec<(String, EmbeddingVector)>, IndexError> {
    read_external_embeddings(BufReader::new(fs::File::open(path)?))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let Some(end) = end else {
            return Err(IndexError::Malformed("unexpected end of payload".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8], IndexError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        EmbeddingVector::normalized((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
    }

    fn random_index(n: usize, dim: usize, seed: u64) -> VectorIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = VectorIndex::new(dim);
        for i in 0..n {
            idx.insert(format!("v{i:05}"), &random_unit(&mut rng, dim), format!("m{i}").into_bytes())
                .unwrap();
        }
        idx
    }

    // Independent oracle: f64 dot products over every stored vector.
    fn brute_force(idx: &VectorIndex, q: &EmbeddingVector, k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = (0..idx.len())
            .map(|s| {
                let d: f64 = idx
                    .vector(s)
                    .iter()
                    .zip(q.as_slice())
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                (idx.ids()[s].clone(), d)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn stored_vector_is_found_first() {
        let idx = random_index(50, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let first = random_unit(&mut rng, 16);
        let hits = idx.search(&first, 3).unwrap();
        assert_eq!(hits[0].id, "v00000");
        assert!((hits[0].cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_larger_than_corpus_and_empty_index() {
        let idx = random_index(5, 8, 2);
        let q = random_unit(&mut ChaCha8Rng::seed_from_u64(9), 8);
        assert_eq!(idx.search(&q, 100).unwrap().len(), 5);
        assert!(VectorIndex::new(8).search(&q, 3).unwrap().is_empty());
    }

    #[test]
    fn exact_search_matches_brute_force() {
        let idx = random_index(300, 24, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q = random_unit(&mut rng, 24);
            let hits = idx.search(&q, 10).unwrap();
            let oracle = brute_force(&idx, &q, 10);
            for (h, (id, c)) in hits.iter().zip(&oracle) {
                assert!((h.cosine - c).abs() < 1e-5);
                // Ids agree unless the oracle scores are numerically tied.
                if h.id != *id {
                    let other = oracle.iter().find(|o| o.0 == h.id).expect("hit in oracle top-k");
                    assert!((other.1 - c).abs() < 1e-5);
                }
            }
            for w in hits.windows(2) {
                assert!(w[0].cosine >= w[1].cosine);
            }
        }
    }

    #[test]
    fn ties_break_by_id() {
        let mut idx = VectorIndex::new(2);
        let v = EmbeddingVector::normalized(vec![1.0, 0.0]);
        idx.insert("b", &v, vec![]).unwrap();
        idx.insert("a", &v, vec![]).unwrap();
        let hits = idx.search(&v, 2).unwrap();
        assert_eq!(hits[0].id, "a");
        assert_eq!(hits[1].id, "b");
    }

    #[test]
    fn rejects_bad_inserts() {
        let mut idx = VectorIndex::new(3);
        let v = EmbeddingVector::normalized(vec![1.0, 0.0, 0.0]);
        idx.insert("a", &v, vec![]).unwrap();
        assert!(matches!(idx.insert("a", &v, vec![]), Err(IndexError::DuplicateId(_))));
        let w = EmbeddingVector::normalized(vec![1.0, 0.0]);
        assert!(matches!(idx.insert("b", &w, vec![]), Err(IndexError::Dimension { .. })));
    }

    #[test]
    fn approximate_recall_on_random_vectors() {
        let dim = 32;
        let mut idx = random_index(1000, dim, 5);
        idx.build_graph(GraphParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut found = 0;
        for _ in 0..100 {
            let q = random_unit(&mut rng, dim);
            let exact: Vec<String> = idx.search(&q, 10).unwrap().into_iter().map(|h| h.id).collect();
            let approx = idx.search_with(&q, 10, SearchMode::Approximate { ef: 128 }).unwrap();
            assert!(approx.iter().all(|h| idx.slot_of(&h.id).is_some()));
            found += approx.iter().filter(|h| exact.contains(&h.id)).count();
        }
        let recall = found as f64 / 1000.0;
        assert!(recall >= 0.95, "recall@10 {recall}");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut idx = random_index(200, 12, 7);
        idx.build_graph(GraphParams { ef_construction: 50, ..GraphParams::default() });
        let bytes = idx.to_bytes();
        let back = VectorIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);

        let plain = random_index(3, 4, 8);
        assert_eq!(VectorIndex::from_bytes(&plain.to_bytes()).unwrap(), plain);
    }

    #[test]
    fn corruption_is_detected() {
        let idx = random_index(20, 8, 9);
        let bytes = idx.to_bytes();
        let truncated = &bytes[..bytes.len() - 17];
        assert!(matches!(VectorIndex::from_bytes(truncated), Err(IndexError::Checksum(_))));
        assert!(matches!(VectorIndex::from_bytes(&bytes[..10]), Err(IndexError::Checksum(_))));

        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 9] ^= 0xff;
        assert!(matches!(VectorIndex::from_bytes(&flipped), Err(IndexError::Checksum(_))));

        let mut wrong_version = bytes.clone();
        wrong_version[8] = 99;
        assert!(matches!(
            VectorIndex::from_bytes(&wrong_version),
            Err(IndexError::VersionMismatch { found: 99, .. })
        ));

        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(VectorIndex::from_bytes(&bad_magic), Err(IndexError::BadMagic)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.vidx");
        let idx = random_index(10, 4, 10);
        save_index(&idx, &path).unwrap();
        assert_eq!(load_index(&path).unwrap(), idx);
    }

    #[test]
    fn external_embeddings() {
        let text = "{\"id\":\"a\",\"vec\":[3,4]}\n\n{\"id\":\"b\",\"vec\":[0,2]}\n";
        let got = read_external_embeddings(text.as_bytes()).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got[0].1.is_unit());
        let bad = "{\"id\":\"a\",\"vec\":[3,4]}\n{\"id\":\"b\",\"vec\":[1]}\n";
        assert!(matches!(
            read_external_embeddings(bad.as_bytes()),
            Err(IndexError::External { line: 2, .. })
        ));
    }
}
