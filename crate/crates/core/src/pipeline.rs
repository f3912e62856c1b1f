//! End-to-end index construction and querying.
//!
//! Building runs, per video: hierarchy construction, fusion with density
//! scoring at every level, contextual embedding, redundancy removal and
//! insertion of every surviving segment (all levels) into one index.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::ProjectionParams;
use crate::config::Config;
use crate::corpus::{build_hierarchies, CorpusError, Segment, SegmentHierarchy};
use crate::dedup::{minimize_redundancy_grouped, DedupReport};
use crate::fusion::{fuse_hierarchy, FusionError};
use crate::index::{contextual_embedding, Embedder, EmbeddingVector, HashingEmbedder, IndexError, VectorIndex};
use crate::scoring::{generalized_density, DensityScorer};
use crate::select::{answer_query, assemble_context, CandidateMeta, ContextBundle, SelectError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error("no segments to index")]
    Empty,
}

/// A fused, scored and embedded hierarchy.
#[derive(Debug, Clone)]
pub struct ProcessedVideo {
    pub hierarchy: SegmentHierarchy,
    /// Final density score of every segment.
    pub scores: BTreeMap<String, f64>,
    /// Contextual embedding of every segment.
    pub embeddings: BTreeMap<String, EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildStats {
    pub videos: usize,
    pub micro_segments: usize,
    pub hierarchy_segments: usize,
    pub indexed: usize,
    pub dedup: DedupReport,
    pub build_ms: f64,
}

pub struct BuildOutput {
    pub index: VectorIndex,
    pub videos: Vec<ProcessedVideo>,
    pub stats: BuildStats,
}

/// Fuses and scores one hierarchy, then embeds every level in context.
pub fn process_video(
    mut h: SegmentHierarchy,
    embedder: &dyn Embedder,
    cfg: &Config,
    projection: Option<&ProjectionParams>,
) -> Result<ProcessedVideo, PipelineError> {
    let scorer = DensityScorer::new(embedder, cfg.density_weights()).with_projection(projection);
    let (order, k) = (cfg.ngram_order, cfg.ngram_k);
    let mut score_level = |segs: &[Segment]| -> Vec<f64> {
        scorer.score_track(segs, order, k).into_iter().map(|s| s.total).collect()
    };
    let fused = fuse_hierarchy(&mut h, embedder, &cfg.fusion_config(), None, &mut score_level)?;

    let fused_emb: HashMap<String, EmbeddingVector> =
        fused.fused.iter().map(|(id, f)| (id.clone(), f.fused_embedding.clone())).collect();
    let gw = cfg.generalized_weights();
    let scores: BTreeMap<String, f64> = fused
        .scores
        .iter()
        .map(|(id, base)| (id.clone(), generalized_density(id, &h, &fused_emb, *base, &gw)))
        .collect();

    let window = cfg.window_config();
    let global = (!fused.global.is_zero()).then_some(&fused.global);
    let mut embeddings = BTreeMap::new();
    for level in 1..=h.depth() {
        let seq: Vec<EmbeddingVector> = h.level(level).iter().map(|s| fused_emb[&s.id].clone()).collect();
        for (k, s) in h.level(level).iter().enumerate() {
            embeddings.insert(s.id.clone(), contextual_embedding(&seq, k, &window, global));
        }
    }
    Ok(ProcessedVideo { hierarchy: h, scores, embeddings })
}

/// Builds the searchable index from level-1 segments.
pub fn build_index(
    segments: &[Segment],
    cfg: &Config,
    projection: Option<&ProjectionParams>,
) -> Result<BuildOutput, PipelineError> {
    let started = Instant::now();
    let embedder = cfg.embedder();
    let hierarchies = build_hierarchies(segments, &cfg.scale()?)?;
    if hierarchies.is_empty() {
        return Err(PipelineError::Empty);
    }
    let videos: Vec<ProcessedVideo> = hierarchies
        .into_par_iter()
        .map(|h| process_video(h, &embedder, cfg, projection))
        .collect::<Result<_, _>>()?;

    let all: Vec<Segment> = videos.iter().flat_map(|v| v.hierarchy.iter().cloned()).collect();
    let all_scores: Vec<f64> = videos
        .iter()
        .flat_map(|v| v.hierarchy.iter().map(|s| v.scores[&s.id]))
        .collect();
    let (kept, report) = if cfg.dedup {
        let out = minimize_redundancy_grouped(&all, &all_scores, &embedder, &cfg.dedup_config());
        (out.pool, out.report)
    } else {
        (all.clone(), DedupReport::default())
    };

    let lookup: HashMap<&str, &ProcessedVideo> = videos
        .iter()
        .flat_map(|v| v.hierarchy.iter().map(move |s| (s.id.as_str(), v)))
        .collect();
    let mut kept = kept;
    kept.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then_with(|| a.level.cmp(&b.level))
            .then_with(|| a.range.start_s.total_cmp(&b.range.start_s))
    });
    let mut index = VectorIndex::new(embedder.dim());
    for s in &kept {
        let v = lookup[s.id.as_str()];
        let meta = CandidateMeta {
            video_id: s.video_id.clone(),
            level: s.level,
            start_s: s.range.start_s,
            end_s: s.range.end_s,
            text: s.content(),
            density: v.scores[&s.id],
        };
        index.insert(s.id.clone(), &v.embeddings[&s.id], meta.to_bytes())?;
    }
    if cfg.approximate {
        index.build_graph(cfg.graph_params());
    }
    let stats = BuildStats {
        videos: videos.len(),
        micro_segments: videos.iter().map(|v| v.hierarchy.level(1).len()).sum(),
        hierarchy_segments: all.len(),
        indexed: index.len(),
        dedup: report,
        build_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(BuildOutput { index, videos, stats })
}

/// Answers questions over a sealed index. Safe to share across threads.
pub struct QueryEngine {
    pub index: VectorIndex,
    pub embedder: HashingEmbedder,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub question: String,
    pub bundle: ContextBundle,
    pub prompt: String,
    pub latency_ms: f64,
}

impl QueryEngine {
    /// The embedder follows the index dimension and the configured seed.
    pub fn new(index: VectorIndex, config: Config) -> Self {
        let embedder = HashingEmbedder::new(index.dim()).with_seed(config.embed_seed);
        Self { index, embedder, config }
    }

    pub fn query(&self, question: &str) -> Result<QueryResult, PipelineError> {
        self.query_with(question, &self.config)
    }

    /// Runs with per-call overrides of the selection settings.
    pub fn query_with(&self, question: &str, cfg: &Config) -> Result<QueryResult, PipelineError> {
        let started = Instant::now();
        let bundle = answer_query(&self.index, &self.embedder, question, &cfg.select_config(), cfg.search_mode())?;
        let prompt = assemble_context(&bundle.entries);
        Ok(QueryResult {
            question: question.to_string(),
            bundle,
            prompt,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}
