//! Score-ordered redundancy removal with a running coverage vector.
//!
//! Segments are visited best-first. A segment whose embedding overlaps the
//! admitted content by less than `tau_dedup` is admitted whole. Otherwise
//! only its uncovered sentences are considered; they are admitted as a
//! refined segment when long enough and dissimilar enough from the pool.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Segment;
use crate::index::{Embedder, EmbeddingVector};
use crate::textmodel::token_count;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DedupConfig {
    pub tau_dedup: f64,
    /// Minimum token count of an admitted novel remainder.
    pub tau_length: usize,
    /// Similarity ceiling between a novel remainder and the pool.
    pub eta: f64,
    /// Decay applied to the coverage before each admission.
    pub lambda: f64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self { tau_dedup: 0.85, tau_length: 10, eta: 0.5, lambda: 1.0 }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.tau_dedup) {
            return Err(format!("tau_dedup must be in [0, 1], got {}", self.tau_dedup));
        }
        if self.tau_length < 1 {
            return Err("tau_length must be >= 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(format!("lambda must be in (0, 1], got {}", self.lambda));
        }
        Ok(())
    }
}

/// Decayed sum of admitted embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageVector {
    acc: Vec<f64>,
    lambda: f64,
}

impl CoverageVector {
    pub fn new(dim: usize, lambda: f64) -> Self {
        Self { acc: vec![0.0; dim], lambda }
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.acc
    }

    pub fn is_zero(&self) -> bool {
        self.acc.iter().all(|v| *v == 0.0)
    }

    /// `C <- lambda * C + e`.
    pub fn admit(&mut self, e: &EmbeddingVector) {
        for (a, v) in self.acc.iter_mut().zip(e.as_slice()) {
            *a = self.lambda * *a + f64::from(*v);
        }
    }
}

/// Cosine between `e` and the normalised accumulator, clamped to [0, 1].
pub fn coverage_overlap(e: &EmbeddingVector, c: &CoverageVector) -> f64 {
    if c.is_zero() || e.is_zero() {
        return 0.0;
    }
    e.cosine(&EmbeddingVector::from_f64(&c.acc)).clamp(0.0, 1.0)
}

/// Splits after `.`, `!` or `?` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            match chars.peek() {
                Some((_, n)) if n.is_whitespace() => {
                    out.push(&text[start..end]);
                    start = end;
                }
                None => {
                    out.push(&text[start..end]);
                    start = end;
                }
                _ => {}
            }
        }
    }
    out.push(&text[start..]);
    out.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Whitespace normalisation and sentence-boundary repair.
pub fn refine(text: &str) -> String {
    let joined = split_sentences(text)
        .into_iter()
        .map(|s| {
            let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
            if s.ends_with(['.', '!', '?']) {
                s
            } else {
                format!("{s}.")
            }
        })
        .collect::<Vec<_>>();
    joined.join(" ")
}

/// Pooled content the novel-delta check compares against: each admitted
/// segment and each of its sentences.
#[derive(Debug, Clone, Default)]
pub struct Pool {
    segments: Vec<EmbeddingVector>,
    sentences: Vec<EmbeddingVector>,
}

impl Pool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn push(&mut self, embedder: &dyn Embedder, text: &str, e: EmbeddingVector) {
        for s in split_sentences(text) {
            let se = embedder.embed(s);
            if !se.is_zero() {
                self.sentences.push(se);
            }
        }
        self.segments.push(e);
    }

    /// Max cosine against pooled segments, clamped to [0, 1].
    pub fn max_segment_cosine(&self, e: &EmbeddingVector) -> f64 {
        self.segments.iter().map(|p| e.cosine(p)).fold(0.0, f64::max).clamp(0.0, 1.0)
    }

    fn max_cosine(&self, e: &EmbeddingVector) -> f64 {
        self.segments
            .iter()
            .chain(&self.sentences)
            .map(|p| e.cosine(p))
            .fold(0.0, f64::max)
            .clamp(0.0, 1.0)
    }
}

/// Sentences of `text` whose embedding stays below `tau_dedup` cosine to
/// everything pooled, joined in order. Empty when fully covered.
pub fn novel_delta(embedder: &dyn Embedder, text: &str, pool: &Pool, tau_dedup: f64) -> String {
    split_sentences(text)
        .into_iter()
        .filter(|s| {
            let e = embedder.embed(s);
            !e.is_zero() && pool.max_cosine(&e) < tau_dedup
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupAction {
    Retained,
    Refined,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupDecision {
    pub id: String,
    pub action: DedupAction,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DedupReport {
    /// One entry per input segment in visiting order.
    pub decisions: Vec<DedupDecision>,
}

impl DedupReport {
    fn ids(&self, action: DedupAction) -> Vec<&str> {
        self.decisions.iter().filter(|d| d.action == action).map(|d| d.id.as_str()).collect()
    }

    pub fn retained(&self) -> Vec<&str> {
        self.ids(DedupAction::Retained)
    }

    pub fn refined(&self) -> Vec<&str> {
        self.ids(DedupAction::Refined)
    }

    pub fn dropped(&self) -> Vec<&str> {
        self.ids(DedupAction::Dropped)
    }

    /// Kept segments over input segments (1.0 for empty input).
    pub fn compression_ratio(&self) -> f64 {
        if self.decisions.is_empty() {
            return 1.0;
        }
        let kept = self.decisions.iter().filter(|d| d.action != DedupAction::Dropped).count();
        kept as f64 / self.decisions.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    /// Admitted segments in visiting order; refined ones carry their
    /// remainder as `fused_text`.
    pub pool: Vec<Segment>,
    /// Scores aligned with `pool`.
    pub scores: Vec<f64>,
    pub report: DedupReport,
}

/// Visiting order: score descending, then start ascending, then id.
pub fn visit_order(segments: &[Segment], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| segments[a].range.start_s.total_cmp(&segments[b].range.start_s))
            .then_with(|| segments[a].id.cmp(&segments[b].id))
    });
    order
}

/// Runs redundancy removal over one group of segments sharing a coverage
/// vector. `scores` is aligned with `segments`.
///
/// The overlap of a segment is the larger of its coverage cosine and its
/// best cosine to a single pooled segment; the second term keeps repeated
/// content from slipping under the threshold once the coverage mixes
/// several distinct topics.
pub fn minimize_redundancy(
    segments: &[Segment],
    scores: &[f64],
    embedder: &dyn Embedder,
    cfg: &DedupConfig,
) -> DedupOutcome {
    assert_eq!(segments.len(), scores.len(), "one score per segment");
    let mut coverage = CoverageVector::new(embedder.dim(), cfg.lambda);
    let mut pool = Pool::new();
    let mut out = DedupOutcome { pool: Vec::new(), scores: Vec::new(), report: DedupReport::default() };
    for i in visit_order(segments, scores) {
        let seg = &segments[i];
        let text = seg.content();
        let e = embedder.embed(&text);
        let overlap = coverage_overlap(&e, &coverage).max(pool.max_segment_cosine(&e));
        let action = if overlap < cfg.tau_dedup {
            coverage.admit(&e);
            pool.push(embedder, &text, e);
            out.pool.push(seg.clone());
            DedupAction::Retained
        } else {
            let delta = refine(&novel_delta(embedder, &text, &pool, cfg.tau_dedup));
            let de = embedder.embed(&delta);
            if token_count(&delta) > cfg.tau_length && pool.max_segment_cosine(&de) < cfg.eta {
                coverage.admit(&de);
                pool.push(embedder, &delta, de);
                let mut s = seg.clone();
                s.fused_text = Some(delta);
                out.pool.push(s);
                DedupAction::Refined
            } else {
                DedupAction::Dropped
            }
        };
        if action != DedupAction::Dropped {
            out.scores.push(scores[i]);
        }
        out.report.decisions.push(DedupDecision { id: seg.id.clone(), action, overlap });
    }
    out
}

/// Runs [`minimize_redundancy`] independently per `(video, level)` group,
/// groups in key order.
pub fn minimize_redundancy_grouped(
    segments: &[Segment],
    scores: &[f64],
    embedder: &dyn Embedder,
    cfg: &DedupConfig,
) -> DedupOutcome {
    let mut groups: BTreeMap<(&str, usize), (Vec<Segment>, Vec<f64>)> = BTreeMap::new();
    for (s, sc) in segments.iter().zip(scores) {
        let g = groups.entry((s.video_id.as_str(), s.level)).or_default();
        g.0.push(s.clone());
        g.1.push(*sc);
    }
    let parts: Vec<DedupOutcome> = groups
        .into_values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(segs, scs)| minimize_redundancy(segs, scs, embedder, cfg))
        .collect();
    let mut out = DedupOutcome { pool: Vec::new(), scores: Vec::new(), report: DedupReport::default() };
    for p in parts {
        out.pool.extend(p.pool);
        out.scores.extend(p.scores);
        out.report.decisions.extend(p.report.decisions);
    }
    out
}
