//! Hierarchical fusion of captions, transcripts and child segments.
//!
//! Each segment gets a readable fused text and a fused embedding. The
//! embedding mixes the caption and transcript embeddings, the
//! attention-weighted child embeddings and a parent context vector. Fusion
//! runs in two passes: bottom-up without parent context, then a refinement
//! pass where each segment sees its parent's bottom-up embedding (the root
//! sees the video's global embedding).

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Segment, SegmentHierarchy};
use crate::index::{global_embedding, Embedder, EmbeddingVector};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FusionError {
    #[error("segment {0}: nothing to fuse")]
    Empty(String),
    #[error("segment {0}: child weights do not match its children")]
    WeightMismatch(String),
    #[error("segment {0}: mixed embedding is zero")]
    Degenerate(String),
}

/// Coefficients of caption, transcript, children and parent context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingWeights {
    pub caption: f64,
    pub transcript: f64,
    pub children: f64,
    pub parent: f64,
}

impl Default for MixingWeights {
    fn default() -> Self {
        Self { caption: 0.35, transcript: 0.35, children: 0.2, parent: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mixing: MixingWeights,
    /// Number of child texts quoted in a parent's fused text.
    pub top_m: usize,
    pub temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { mixing: MixingWeights::default(), top_m: 3, temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedSegment {
    pub id: String,
    pub fused_text: String,
    pub fused_embedding: EmbeddingVector,
}

/// Softmax attention over a segment's children, in child order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChildWeights {
    pub weights: Vec<(String, f64)>,
}

impl ChildWeights {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.weights.iter().find(|(c, _)| c == id).map(|(_, w)| *w)
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|(_, w)| w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Softmax of `scores / temperature`.
pub fn child_attention(children: &[(String, f64)], temperature: f64) -> ChildWeights {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = children.iter().map(|(_, s)| s / t).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = children.iter().map(|(_, s)| (s / t - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    ChildWeights {
        weights: children.iter().zip(exps).map(|((id, _), e)| (id.clone(), e / z)).collect(),
    }
}

/// `[VISUAL] caption [AUDIO] transcript [DETAIL] children`, empty parts
/// omitted. Children are the `top_m` heaviest, heaviest first.
pub fn fused_template(caption: &str, transcript: &str, children: &[FusedSegment], weights: &ChildWeights, top_m: usize) -> String {
    let mut parts = Vec::new();
    if !caption.trim().is_empty() {
        parts.push(format!("[VISUAL] {}", caption.trim()));
    }
    if !transcript.trim().is_empty() {
        parts.push(format!("[AUDIO] {}", transcript.trim()));
    }
    let mut ranked: Vec<(&FusedSegment, f64)> = children
        .iter()
        .filter(|c| !c.fused_text.trim().is_empty())
        .map(|c| (c, weights.get(&c.id).unwrap_or(0.0)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    let detail: Vec<&str> = ranked.iter().take(top_m).map(|(c, _)| c.fused_text.trim()).collect();
    if !detail.is_empty() {
        parts.push(format!("[DETAIL] {}", detail.join(" ")));
    }
    parts.join(" ")
}

/// Fuses one segment from its own texts, its fused children and an
/// optional parent context.
pub fn fuse_segment(
    embedder: &dyn Embedder,
    id: &str,
    caption: &str,
    transcript: &str,
    children: &[FusedSegment],
    weights: &ChildWeights,
    parent: Option<&EmbeddingVector>,
    cfg: &FusionConfig,
) -> Result<FusedSegment, FusionError> {
    let cap = embedder.embed(caption);
    let tr = embedder.embed(transcript);
    fuse_with_embeddings(embedder.dim(), id, (caption, &cap), (transcript, &tr), children, weights, parent, cfg)
}

#[allow(clippy::too_many_arguments)]
fn fuse_with_embeddings(
    dim: usize,
    id: &str,
    caption: (&str, &EmbeddingVector),
    transcript: (&str, &EmbeddingVector),
    children: &[FusedSegment],
    weights: &ChildWeights,
    parent: Option<&EmbeddingVector>,
    cfg: &FusionConfig,
) -> Result<FusedSegment, FusionError> {
    if weights.weights.len() != children.len() || children.iter().any(|c| weights.get(&c.id).is_none()) {
        return Err(FusionError::WeightMismatch(id.to_string()));
    }
    if caption.0.trim().is_empty() && transcript.0.trim().is_empty() && children.is_empty() {
        return Err(FusionError::Empty(id.to_string()));
    }
    let m = &cfg.mixing;
    let mut acc = vec![0.0f64; dim];
    let mut add = |e: &EmbeddingVector, w: f64| {
        if w != 0.0 {
            for (a, v) in acc.iter_mut().zip(e.as_slice()) {
                *a += w * f64::from(*v);
            }
        }
    };
    add(caption.1, m.caption);
    add(transcript.1, m.transcript);
    // Sum children in id order so the result does not depend on how the
    // caller ordered them.
    let mut kids: Vec<&FusedSegment> = children.iter().collect();
    kids.sort_by(|a, b| a.id.cmp(&b.id));
    for c in kids {
        add(&c.fused_embedding, m.children * weights.get(&c.id).unwrap_or(0.0));
    }
    if let Some(p) = parent {
        add(p, m.parent);
    }
    let fused_embedding = EmbeddingVector::from_f64(&acc);
    if fused_embedding.is_zero() {
        return Err(FusionError::Degenerate(id.to_string()));
    }
    Ok(FusedSegment {
        id: id.to_string(),
        fused_text: fused_template(caption.0, transcript.0, children, weights, cfg.top_m),
        fused_embedding,
    })
}

/// Result of fusing one hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedHierarchy {
    /// Final (refined) fused segments by id.
    pub fused: BTreeMap<String, FusedSegment>,
    /// Bottom-up embeddings by id.
    pub bottom_up: BTreeMap<String, EmbeddingVector>,
    /// Density score of every segment, as returned by the level scorer.
    pub scores: BTreeMap<String, f64>,
    /// Attention over the children of every non-leaf segment.
    pub weights: BTreeMap<String, ChildWeights>,
    pub global: EmbeddingVector,
}

/// Fuses a whole hierarchy and writes fused texts back into it.
///
/// `score_level` is called once per level, finest first, on that level's
/// segments after their fused text is set; its scores drive the attention
/// of the level above. `global` defaults to the mean of the bottom-up root
/// embeddings.
pub fn fuse_hierarchy(
    h: &mut SegmentHierarchy,
    embedder: &dyn Embedder,
    cfg: &FusionConfig,
    global: Option<EmbeddingVector>,
    score_level: &mut dyn FnMut(&[Segment]) -> Vec<f64>,
) -> Result<FusedHierarchy, FusionError> {
    let depth = h.depth();
    let mut own: HashMap<String, (EmbeddingVector, EmbeddingVector)> = HashMap::new();
    let mut bottom: HashMap<String, FusedSegment> = HashMap::new();
    let mut scores = BTreeMap::new();
    let mut weights = BTreeMap::new();

    for level in 1..=depth {
        let segs = h.level(level);
        let embedded: Vec<(EmbeddingVector, EmbeddingVector)> = segs
            .par_iter()
            .map(|s| (embedder.embed(s.caption()), embedder.embed(s.transcript())))
            .collect();
        let level_weights: Vec<ChildWeights> = segs
            .iter()
            .map(|s| {
                let kids: Vec<(String, f64)> = h
                    .children(&s.id)
                    .iter()
                    .map(|c| (c.clone(), scores.get(c).copied().unwrap_or(0.0)))
                    .collect();
                child_attention(&kids, cfg.temperature)
            })
            .collect();
        let fused: Vec<FusedSegment> = segs
            .par_iter()
            .zip(&embedded)
            .zip(&level_weights)
            .map(|((s, (cap, tr)), w)| {
                let kids: Vec<FusedSegment> = h.children(&s.id).iter().map(|c| bottom[c].clone()).collect();
                fuse_with_embeddings(embedder.dim(), &s.id, (s.caption(), cap), (s.transcript(), tr), &kids, w, None, cfg)
            })
            .collect::<Result<_, _>>()?;
        for ((s, e), (f, w)) in segs.iter().zip(embedded).zip(fused.into_iter().zip(level_weights)) {
            own.insert(s.id.clone(), e);
            if !w.is_empty() {
                weights.insert(s.id.clone(), w);
            }
            bottom.insert(s.id.clone(), f);
        }
        for s in &mut h.levels[level - 1] {
            s.fused_text = Some(bottom[&s.id].fused_text.clone());
        }
        let level_scores = score_level(h.level(level));
        for (s, sc) in h.level(level).iter().zip(level_scores) {
            scores.insert(s.id.clone(), sc);
        }
    }

    let global = global
        .or_else(|| global_embedding(h.roots().iter().map(|s| &bottom[&s.id].fused_embedding)))
        .unwrap_or_else(|| EmbeddingVector::zero(embedder.dim()));

    let ids: Vec<String> = h.iter().map(|s| s.id.clone()).collect();
    let refined: Vec<FusedSegment> = ids
        .par_iter()
        .map(|id| {
            let s = h.get(id).expect("segment present");
            let kids: Vec<FusedSegment> = h.children(id).iter().map(|c| bottom[c].clone()).collect();
            let parent = match h.parent(id) {
                Some(p) => &bottom[p].fused_embedding,
                None => &global,
            };
            let parent = (!parent.is_zero()).then_some(parent);
            let (cap, tr) = &own[id];
            let w = weights.get(id).cloned().unwrap_or_default();
            fuse_with_embeddings(embedder.dim(), id, (s.caption(), cap), (s.transcript(), tr), &kids, &w, parent, cfg)
        })
        .collect::<Result<_, _>>()?;

    Ok(FusedHierarchy {
        fused: refined.into_iter().map(|f| (f.id.clone(), f)).collect(),
        bottom_up: bottom.into_iter().map(|(k, f)| (k, f.fused_embedding)).collect(),
        scores,
        weights,
        global,
    })
}
