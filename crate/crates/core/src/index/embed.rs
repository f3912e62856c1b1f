//! Embedding vectors and the deterministic feature-hashing embedder.

use serde::{Deserialize, Serialize};

use crate::textmodel::tokenize;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 1024;

const UNIGRAM_WEIGHT: f32 = 1.0;
const BIGRAM_WEIGHT: f32 = 0.5;

/// Dense vector, unit-norm unless it is the zero vector.
///
/// The zero vector stands for "no content" (empty text). It compares with
/// cosine 0 to everything, itself included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// L2-normalises `values`. An all-zero (or non-finite) input stays zero.
    pub fn normalized(mut values: Vec<f32>) -> Self {
        let norm = l2(&values);
        if norm > 0.0 && norm.is_finite() {
            let inv = (1.0 / norm) as f32;
            values.iter_mut().for_each(|v| *v *= inv);
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
        Self { values }
    }

    /// Normalises an f64 accumulator.
    pub fn from_f64(values: &[f64]) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            Self { values: values.iter().map(|v| (v / norm) as f32).collect() }
        } else {
            Self::zero(values.len())
        }
    }

    /// Wraps values that are already unit-norm (e.g. read back from disk).
    pub(crate) fn from_raw(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn zero(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// True when the norm is 1 within 1e-6.
    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= 1e-6
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.values, &other.values)
    }

    /// Cosine similarity; 0 when either side is the zero vector.
    pub fn cosine(&self, other: &Self) -> f64 {
        cosine(&self.values, &other.values)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] += a[i + l] * b[i + l];
        }
    }
    let mut s: f64 = acc.iter().map(|v| f64::from(*v)).sum();
    for i in chunks * 8..a.len() {
        s += f64::from(a[i] * b[i]);
    }
    s
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = l2(a);
    let nb = l2(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// A text embedding provider.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

/// Signed feature hashing of token unigrams and bigrams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1), seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn embed_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> EmbeddingVector {
        let mut v = vec![0.0f32; self.dim];
        for t in tokens {
            self.add_feature(&mut v, b"u", t.as_ref(), "", UNIGRAM_WEIGHT);
        }
        for w in tokens.windows(2) {
            self.add_feature(&mut v, b"b", w[0].as_ref(), w[1].as_ref(), BIGRAM_WEIGHT);
        }
        EmbeddingVector::normalized(v)
    }

    fn add_feature(&self, v: &mut [f32], kind: &[u8], a: &str, b: &str, weight: f32) {
        let mut h = Fnv1a::new(self.seed);
        h.write(kind);
        h.write(&[0]);
        h.write(a.as_bytes());
        h.write(&[0]);
        h.write(b.as_bytes());
        let x = splitmix(h.finish());
        let bucket = (x % self.dim as u64) as usize;
        let sign = if x >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign * weight;
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        self.embed_tokens(&tokenize(text))
    }
}

struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn new(seed: u64) -> Self {
        Self(Self::OFFSET ^ seed.wrapping_mul(Self::PRIME))
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

// Finaliser so that bucket and sign bits are well mixed.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
