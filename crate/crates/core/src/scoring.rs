//! Information-density scoring of segments.
//!
//! `total = novelty + alpha * entropy + beta * coherence - gamma * redundancy`
//!
//! Cross-modal coherence and segment-to-segment dependence use clamped
//! embedding cosine as the mutual-information proxy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::align::ProjectionParams;
use crate::corpus::{Segment, SegmentHierarchy};
use crate::index::{Embedder, EmbeddingVector};
use crate::textmodel::{token_entropy, tokenize, NGramLm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Redundancy weight.
    pub gamma: f64,
}

impl Default for DensityWeights {
    fn default() -> Self {
        Self { alpha: 0.35, beta: 0.25, gamma: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityScore {
    pub total: f64,
    pub novelty: f64,
    pub entropy: f64,
    pub coherence: f64,
    pub redundancy: f64,
    /// Set when fewer than two modalities carried text, forcing coherence
    /// to 0.
    pub single_modality: bool,
}

impl DensityScore {
    pub fn compose(novelty: f64, entropy: f64, coherence: f64, redundancy: f64, w: &DensityWeights) -> Self {
        Self {
            total: novelty + w.alpha * entropy + w.beta * coherence - w.gamma * redundancy,
            novelty,
            entropy,
            coherence,
            redundancy,
            single_modality: false,
        }
    }

    /// Recomputes the total from the components.
    pub fn recompose(&self, w: &DensityWeights) -> f64 {
        self.novelty + w.alpha * self.entropy + w.beta * self.coherence - w.gamma * self.redundancy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneralizedWeights {
    pub lambda_neighbor: f64,
    pub mu_child: f64,
}

/// Cosine between caption and transcript embeddings clamped to [0, 1];
/// 0 if either text is empty.
pub fn cross_modal_coherence(embedder: &dyn Embedder, caption: &str, transcript: &str) -> f64 {
    coherence_of(&embedder.embed(caption), &embedder.embed(transcript))
}

pub fn coherence_of(caption: &EmbeddingVector, transcript: &EmbeddingVector) -> f64 {
    caption.cosine(transcript).clamp(0.0, 1.0)
}

/// Max cosine (clamped to [0, 1]) between `embedding` and the pool.
pub fn redundancy(embedding: &EmbeddingVector, pool: &[EmbeddingVector]) -> f64 {
    pool.iter()
        .map(|p| embedding.cosine(p))
        .fold(0.0f64, f64::max)
        .clamp(0.0, 1.0)
}

/// Scores segments with shared weights, embedder and an optional learned
/// cross-modal projection.
#[derive(Clone, Copy)]
pub struct DensityScorer<'a> {
    pub embedder: &'a dyn Embedder,
    pub weights: DensityWeights,
    pub projection: Option<&'a ProjectionParams>,
}

impl<'a> DensityScorer<'a> {
    pub fn new(embedder: &'a dyn Embedder, weights: DensityWeights) -> Self {
        Self { embedder, weights, projection: None }
    }

    pub fn with_projection(mut self, p: Option<&'a ProjectionParams>) -> Self {
        self.projection = p;
        self
    }

    pub fn coherence(&self, caption: &str, transcript: &str) -> f64 {
        if caption.trim().is_empty() || transcript.trim().is_empty() {
            return 0.0;
        }
        let c = self.embedder.embed(caption);
        let t = self.embedder.embed(transcript);
        match self.projection {
            Some(p) if p.d_in() == c.dim() => coherence_of(&p.project_visual(&c), &p.project_audio(&t)),
            _ => coherence_of(&c, &t),
        }
    }

    /// Scores one segment against the model of its history and the pool of
    /// already selected embeddings.
    pub fn score(&self, segment: &Segment, lm: &NGramLm, pool: &[EmbeddingVector]) -> DensityScore {
        let content = segment.content();
        let tokens = tokenize(&content);
        let novelty = lm.novelty(&tokens);
        let entropy = token_entropy(&tokens);
        let caption = segment.caption();
        let transcript = segment.transcript();
        let single = caption.trim().is_empty() || transcript.trim().is_empty();
        let coherence = if single { 0.0 } else { self.coherence(caption, transcript) };
        let r = redundancy(&self.embedder.embed(&content), pool);
        let mut s = DensityScore::compose(novelty, entropy, coherence, r, &self.weights);
        s.single_modality = single;
        s
    }

    /// Scores a temporally ordered run of same-level segments of one video.
    ///
    /// Each segment is scored against an n-gram model of everything before
    /// it and a redundancy pool of the preceding segments' embeddings. The
    /// model's vocabulary is the run's vocabulary.
    pub fn score_track(&self, segments: &[Segment], order: usize, k: f64) -> Vec<DensityScore> {
        let token_lists: Vec<Vec<String>> = segments.iter().map(|s| tokenize(&s.content())).collect();
        let vocab = token_lists
            .iter()
            .flatten()
            .collect::<std::collections::HashSet<_>>()
            .len();
        let mut lm = NGramLm::new(order, k).with_vocab_size(vocab);
        let mut pool: Vec<EmbeddingVector> = Vec::with_capacity(segments.len());
        let mut out = Vec::with_capacity(segments.len());
        for (seg, toks) in segments.iter().zip(&token_lists) {
            out.push(self.score(seg, &lm, &pool));
            lm.observe(toks);
            let e = self.embedder.embed(&seg.content());
            if !e.is_zero() {
                pool.push(e);
            }
        }
        out
    }
}

/// Base score plus `lambda * Σ neighbour cosine + mu * Σ child cosine`.
///
/// Neighbours are the adjacent same-parent siblings; leaves have no child
/// term. Segments missing from `embeddings` contribute nothing.
pub fn generalized_density(
    segment_id: &str,
    hierarchy: &SegmentHierarchy,
    embeddings: &HashMap<String, EmbeddingVector>,
    base: f64,
    gw: &GeneralizedWeights,
) -> f64 {
    let Some(e) = embeddings.get(segment_id) else {
        return base;
    };
    let sim = |other: &str| embeddings.get(other).map_or(0.0, |o| e.cosine(o).clamp(0.0, 1.0));
    let neighbor: f64 = hierarchy.neighbors(segment_id).into_iter().map(sim).sum();
    let child: f64 = hierarchy.children(segment_id).iter().map(|c| sim(c)).sum();
    base + gw.lambda_neighbor * neighbor + gw.mu_child * child
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_hierarchy, segments_from_records, Modality, ScaleConfig, SegmentRecord};
    use crate::index::HashingEmbedder;
    use crate::textmodel::train_ngram;
    use proptest::prelude::*;

    fn seg(caption: &str, transcript: &str) -> Segment {
        let mut recs = Vec::new();
        for (m, t) in [(Modality::Visual, caption), (Modality::Audio, transcript)] {
            if !t.is_empty() {
                recs.push(SegmentRecord {
                    video_id: "v".into(),
                    level: 1,
                    start_s: 0.0,
                    end_s: 3.0,
                    modality: m,
                    text: t.into(),
                    confidence: None,
                });
            }
        }
        segments_from_records(recs).unwrap().remove(0)
    }

    fn basis(dim: usize, i: usize) -> EmbeddingVector {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        EmbeddingVector::normalized(v)
    }

    #[test]
    fn default_weights() {
        let w = DensityWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma), (0.35, 0.25, 0.15));
    }

    #[test]
    fn single_modality_zero_entropy_composition() {
        let e = HashingEmbedder::default();
        let scorer = DensityScorer::new(&e, DensityWeights::default());
        // Uniform model over 4 tokens: novelty 2 bits per token.
        let lm = NGramLm::new(2, 1.0).with_vocab_size(4);
        let s = scorer.score(&seg("a a a", ""), &lm, &[]);
        assert!(s.single_modality);
        assert_eq!(s.coherence, 0.0);
        assert_eq!(s.redundancy, 0.0);
        assert_eq!(s.entropy, 0.0);
        assert!((s.novelty - 2.0).abs() < 1e-12);
        assert!((s.total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_of_pooled_segment() {
        let e = HashingEmbedder::default();
        let scorer = DensityScorer::new(&e, DensityWeights::default());
        let s = seg("a b", "");
        // History "a b a b" with k = 0 predicts "a b" exactly.
        let lm = train_ngram(&[tokenize("a b a b")], 2, 0.0);
        let pool = vec![e.embed("a b")];
        let score = scorer.score(&s, &lm, &pool);
        assert!(score.novelty.abs() < 1e-12);
        assert!((score.entropy - 1.0).abs() < 1e-12);
        assert!((score.redundancy - 1.0).abs() < 1e-6);
        assert!((score.total - 0.20).abs() < 1e-6);
    }

    #[test]
    fn coherence_cases() {
        let e = HashingEmbedder::default();
        assert!((cross_modal_coherence(&e, "red car", "red car") - 1.0).abs() < 1e-6);
        assert_eq!(cross_modal_coherence(&e, "", "red car"), 0.0);
        let disjoint = cross_modal_coherence(&e, "alpha beta gamma delta", "one two three four");
        assert!(disjoint < 0.2, "{disjoint}");
        // Appending tokens moves the pair further apart.
        let base = "the quick brown fox jumps over";
        let c1 = cross_modal_coherence(&e, base, &format!("{base} lazily"));
        let c2 = cross_modal_coherence(&e, base, &format!("{base} lazily today"));
        let c3 = cross_modal_coherence(&e, base, &format!("{base} lazily today again"));
        assert!(c1 > 0.0 && c1 < 1.0);
        assert!(c1 > c2 && c2 > c3, "{c1} {c2} {c3}");
    }

    #[test]
    fn redundancy_cases() {
        let a = basis(4, 0);
        assert_eq!(redundancy(&a, &[]), 0.0);
        assert!((redundancy(&a, &[basis(4, 1), a.clone()]) - 1.0).abs() < 1e-9);
        let mixed = EmbeddingVector::normalized(vec![0.6, 0.8, 0.0, 0.0]);
        let pool = [basis(4, 0), basis(4, 1), basis(4, 2)];
        let brute = pool.iter().map(|p| mixed.cosine(p)).fold(f64::MIN, f64::max);
        assert!((redundancy(&mixed, &pool) - brute).abs() < 1e-12);
        assert!((brute - 0.8).abs() < 1e-6);
    }

    fn hierarchy_with_texts() -> SegmentHierarchy {
        let recs = (0..60)
            .map(|i| SegmentRecord {
                video_id: "v".into(),
                level: 1,
                start_s: i as f64 * 3.0,
                end_s: (i + 1) as f64 * 3.0,
                modality: Modality::Visual,
                text: format!("scene {} item {}", i % 7, i),
                confidence: None,
            })
            .collect();
        build_hierarchy(&segments_from_records(recs).unwrap(), &ScaleConfig::default()).unwrap()
    }

    #[test]
    fn generalized_density_cases() {
        let h = hierarchy_with_texts();
        let mut emb: HashMap<String, EmbeddingVector> = HashMap::new();
        // Leaf v:1:0 has a single neighbour v:1:1 at cosine 0.5.
        emb.insert("v:1:0".into(), basis(3, 0));
        emb.insert("v:1:1".into(), EmbeddingVector::normalized(vec![0.5, 0.75f32.sqrt(), 0.0]));
        let gw = GeneralizedWeights { lambda_neighbor: 1.0, mu_child: 1.0 };
        let got = generalized_density("v:1:0", &h, &emb, 2.0, &gw);
        assert!((got - 2.5).abs() < 1e-6);
        assert_eq!(generalized_density("v:1:0", &h, &emb, 2.0, &GeneralizedWeights::default()), 2.0);

        // Root with 6 children of known cosines.
        emb.insert("v:3:0".into(), basis(3, 0));
        let cos: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        for (i, c) in cos.iter().enumerate() {
            let s = (1.0 - c * c).sqrt();
            emb.insert(format!("v:2:{i}"), EmbeddingVector::normalized(vec![*c as f32, s as f32, 0.0]));
        }
        let gw = GeneralizedWeights { lambda_neighbor: 1.0, mu_child: 0.5 };
        let got = generalized_density("v:3:0", &h, &emb, 1.0, &gw);
        assert!((got - (1.0 + 0.5 * cos.iter().sum::<f64>())).abs() < 1e-6);
    }

    #[test]
    fn zero_generalized_weights_equal_base_over_corpus() {
        let h = hierarchy_with_texts();
        let e = HashingEmbedder::new(256);
        let scorer = DensityScorer::new(&e, DensityWeights::default());
        let scores = scorer.score_track(h.level(1), 3, 0.5);
        let emb: HashMap<String, EmbeddingVector> =
            h.level(1).iter().map(|s| (s.id.clone(), e.embed(&s.content()))).collect();
        for (s, sc) in h.level(1).iter().zip(&scores) {
            let g = generalized_density(&s.id, &h, &emb, sc.total, &GeneralizedWeights::default());
            assert_eq!(g, sc.total);
            assert!((sc.recompose(&scorer.weights) - sc.total).abs() < 1e-9);
        }
    }

    #[test]
    fn score_track_penalizes_repeats() {
        let e = HashingEmbedder::default();
        let scorer = DensityScorer::new(&e, DensityWeights::default());
        let a = seg("red bird on wire", "birds chirping loudly");
        let b = seg("blue ocean waves crash", "surf noise");
        let scores = scorer.score_track(&[a.clone(), b, a], 3, 0.5);
        assert!(scores[2].redundancy > 0.999);
        assert!(scores[2].total < scores[0].total);
    }

    proptest! {
        #[test]
        fn total_decreases_in_redundancy(
            n in 0.0f64..10.0, h in 0.0f64..5.0, c in 0.0f64..1.0, r1 in 0.0f64..1.0, r2 in 0.0f64..1.0,
        ) {
            prop_assume!((r1 - r2).abs() > 1e-9);
            let w = DensityWeights::default();
            let a = DensityScore::compose(n, h, c, r1, &w);
            let b = DensityScore::compose(n, h, c, r2, &w);
            prop_assert_eq!(a.total > b.total, r1 < r2);
            prop_assert!((a.recompose(&w) - a.total).abs() < 1e-9);
        }
    }
}
