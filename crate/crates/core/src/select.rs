//! Query-time selection: encode, retrieve, rerank, fit to a token budget
//! and assemble a prompt.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::TimeRange;
use crate::index::{Embedder, EmbeddingVector, IndexError, SearchMode, VectorIndex};
use crate::textmodel::{token_count, tokenize};

/// Largest instance the exact selection oracle accepts.
pub const ORACLE_MAX_ITEMS: usize = 22;

#[derive(Debug, thiserror::Error)]
pub enum SelectError {
    #[error("empty query")]
    EmptyQuery,
    #[error("k0 must be >= 1")]
    ZeroK0,
    #[error("oracle accepts at most {ORACLE_MAX_ITEMS} items, got {0}")]
    OracleGuard(usize),
    #[error("candidate {id}: bad metadata: {message}")]
    Metadata { id: String, message: String },
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub tokens: Vec<String>,
    pub embedding: EmbeddingVector,
}

pub fn encode_query(embedder: &dyn Embedder, text: &str) -> Result<Query, SelectError> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(SelectError::EmptyQuery);
    }
    Ok(Query { text: text.to_string(), embedding: embedder.embed(text), tokens })
}

/// Per-entry metadata stored alongside each indexed vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMeta {
    pub video_id: String,
    pub level: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub density: f64,
}

impl CandidateMeta {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("metadata serialises")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub meta: CandidateMeta,
    pub embedding: EmbeddingVector,
    /// Cosine to the query from the first-stage search.
    pub cosine: f64,
    /// Tokens of the rendered entry, header included.
    pub tokens: usize,
}

impl Candidate {
    pub fn range(&self) -> TimeRange {
        TimeRange::new(self.meta.start_s, self.meta.end_s)
    }
}

/// First-stage retrieval of the `k0` nearest entries.
pub fn retrieve(index: &VectorIndex, query: &Query, k0: usize, mode: SearchMode) -> Result<Vec<Candidate>, SelectError> {
    if k0 == 0 {
        return Err(SelectError::ZeroK0);
    }
    index
        .search_with(&query.embedding, k0, mode)?
        .into_iter()
        .map(|hit| {
            let meta = CandidateMeta::from_bytes(index.meta(hit.slot))
                .map_err(|e| SelectError::Metadata { id: hit.id.clone(), message: e.to_string() })?;
            let tokens = token_count(&render_entry(&TimeRange::new(meta.start_s, meta.end_s), &meta.text));
            Ok(Candidate {
                embedding: EmbeddingVector::normalized(index.vector(hit.slot).to_vec()),
                id: hit.id,
                meta,
                cosine: hit.cosine,
                tokens,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankWeights {
    pub cosine: f64,
    pub lexical: f64,
}

impl Default for RerankWeights {
    fn default() -> Self {
        Self { cosine: 0.5, lexical: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub candidate: Candidate,
    pub lexical: f64,
    pub score: f64,
}

/// IDF-weighted share of the distinct query tokens present in each
/// document. Document frequencies come from `docs` themselves with
/// `idf = ln((N + 1) / (df + 1)) + 1`.
pub fn lexical_overlap(query: &[String], docs: &[Vec<String>]) -> Vec<f64> {
    let qset: BTreeSet<&str> = query.iter().map(String::as_str).collect();
    let doc_sets: Vec<HashSet<&str>> = docs.iter().map(|d| d.iter().map(String::as_str).collect()).collect();
    let n = docs.len() as f64;
    let idf: BTreeMap<&str, f64> = qset
        .iter()
        .map(|t| {
            let df = doc_sets.iter().filter(|d| d.contains(t)).count() as f64;
            (*t, ((n + 1.0) / (df + 1.0)).ln() + 1.0)
        })
        .collect();
    let total: f64 = idf.values().sum();
    doc_sets
        .iter()
        .map(|d| {
            if total == 0.0 {
                return 0.0;
            }
            qset.iter().filter(|t| d.contains(*t)).map(|t| idf[t]).sum::<f64>() / total
        })
        .collect()
}

/// Scores candidates by weighted cosine and lexical overlap, descending,
/// ties by id.
pub fn rerank(candidates: Vec<Candidate>, query: &Query, w: &RerankWeights) -> Vec<Ranked> {
    let docs: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(&c.meta.text)).collect();
    let lex = lexical_overlap(&query.tokens, &docs);
    let mut out: Vec<Ranked> = candidates
        .into_iter()
        .zip(lex)
        .map(|(c, l)| {
            let cos = c.embedding.cosine(&query.embedding);
            Ranked { score: w.cosine * cos + w.lexical * l, lexical: l, candidate: c }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.candidate.id.cmp(&b.candidate.id)));
    out
}

/// Largest `k` whose first `k` lengths sum to at most `budget`.
pub fn budget_k_star(lengths: &[usize], budget: usize) -> usize {
    let mut used = 0usize;
    for (k, len) in lengths.iter().enumerate() {
        used += len;
        if used > budget {
            return k;
        }
    }
    lengths.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub score: f64,
    pub length: usize,
}

pub fn total_value(items: &[Item], chosen: &[usize]) -> f64 {
    chosen.iter().map(|&i| items[i].score).sum()
}

/// Greedy by `score / length`, skipping items that no longer fit. Returns
/// chosen indices ascending.
pub fn knapsack_select(items: &[Item], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    let density = |i: usize| items[i].score / items[i].length.max(1) as f64;
    order.sort_by(|&a, &b| density(b).total_cmp(&density(a)).then_with(|| items[a].id.cmp(&items[b].id)));
    let mut used = 0;
    let mut chosen = Vec::new();
    for i in order {
        if used + items[i].length <= budget {
            used += items[i].length;
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    chosen
}

fn sorted_ids<'a>(items: &'a [Item], set: &[usize]) -> Vec<&'a str> {
    let mut ids: Vec<&str> = set.iter().map(|&i| items[i].id.as_str()).collect();
    ids.sort_unstable();
    ids
}

/// `a` beats `b`: higher value, or equal value and a smaller sorted id list.
fn better(items: &[Item], a: &[usize], b: &[usize]) -> bool {
    let (va, vb) = (total_value(items, a), total_value(items, b));
    let tol = 1e-12 * va.abs().max(vb.abs()).max(1.0);
    if (va - vb).abs() > tol {
        return va > vb;
    }
    sorted_ids(items, a) < sorted_ids(items, b)
}

/// Exact optimum by dynamic programming over used length. Returns chosen
/// indices ascending.
pub fn brute_force_select(items: &[Item], budget: usize) -> Result<Vec<usize>, SelectError> {
    if items.len() > ORACLE_MAX_ITEMS {
        return Err(SelectError::OracleGuard(items.len()));
    }
    let cap = budget.min(items.iter().map(|i| i.length).sum());
    // best[w]: best set with total length at most w.
    let mut best: Vec<Vec<usize>> = vec![Vec::new(); cap + 1];
    for (i, item) in items.iter().enumerate() {
        if item.length > cap {
            continue;
        }
        for w in (item.length..=cap).rev() {
            let mut with = best[w - item.length].clone();
            with.push(i);
            if better(items, &with, &best[w]) {
                best[w] = with;
            }
        }
    }
    let mut out = best.pop().unwrap_or_default();
    out.sort_unstable();
    Ok(out)
}

/// Mean cosine of temporally adjacent entries of the same video; 1.0 when
/// there is no adjacent pair.
pub fn coherence(entries: &[(&str, f64, &EmbeddingVector)]) -> f64 {
    let mut sorted: Vec<&(&str, f64, &EmbeddingVector)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0).then_with(|| a.1.total_cmp(&b.1)));
    let sims: Vec<f64> = sorted
        .windows(2)
        .filter(|w| w[0].0 == w[1].0)
        .map(|w| w[0].2.cosine(w[1].2))
        .collect();
    if sims.is_empty() {
        1.0
    } else {
        sims.iter().sum::<f64>() / sims.len() as f64
    }
}

fn two_digits(x: u64) -> String {
    format!("{x:02}")
}

pub fn format_timestamp(seconds: f64) -> String {
    let s = seconds.max(0.0).round() as u64;
    format!("{}:{}:{}", two_digits(s / 3600), two_digits(s / 60 % 60), two_digits(s % 60))
}

/// `[HH:MM:SS–HH:MM:SS] text`.
pub fn render_entry(range: &TimeRange, text: &str) -> String {
    format!("[{}\u{2013}{}] {}", format_timestamp(range.start_s), format_timestamp(range.end_s), text.trim())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Rank,
    Density,
}

impl std::str::FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rank" => Ok(Self::Rank),
            "density" => Ok(Self::Density),
            other => Err(format!("unknown mode {other:?} (expected rank or density)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub budget: usize,
    pub k0: usize,
    pub coherence_tau: f64,
    pub max_retries: usize,
    pub rerank: RerankWeights,
    pub mode: SelectionMode,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            budget: 512,
            k0: 50,
            coherence_tau: 0.0,
            max_retries: 4,
            rerank: RerankWeights::default(),
            mode: SelectionMode::Rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub id: String,
    pub video_id: String,
    pub level: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub tokens: usize,
    pub density: f64,
    pub cosine: f64,
    pub rerank: f64,
    /// 0-based position in the reranked list.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    /// Ordered by (video, start).
    pub entries: Vec<BundleEntry>,
    pub total_tokens: usize,
    pub budget: usize,
    /// Number of admissible ranked candidates that fit as a prefix.
    pub k_star: usize,
    pub coherence: f64,
    pub mode: SelectionMode,
}

impl ContextBundle {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    /// Entries among the `k` best-ranked members of the bundle.
    pub fn top(&self, k: usize) -> Vec<&BundleEntry> {
        let mut by_rank: Vec<&BundleEntry> = self.entries.iter().collect();
        by_rank.sort_by_key(|e| e.rank);
        by_rank.truncate(k);
        by_rank
    }
}

/// Drops candidates whose range overlaps a better-ranked candidate of the
/// same video, so a bundle never repeats a span at two granularities.
pub fn suppress_overlaps(ranked: &[Ranked]) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, r) in ranked.iter().enumerate() {
        let c = &r.candidate;
        let clash = kept.iter().any(|&j| {
            let o = &ranked[j].candidate;
            o.meta.video_id == c.meta.video_id && o.range().overlaps(&c.range())
        });
        if !clash {
            kept.push(i);
        }
    }
    kept
}

fn choose(ranked: &[Ranked], admissible: &[usize], mode: SelectionMode, budget: usize) -> Vec<usize> {
    match mode {
        SelectionMode::Rank => {
            let lengths: Vec<usize> = admissible.iter().map(|&i| ranked[i].candidate.tokens).collect();
            admissible[..budget_k_star(&lengths, budget)].to_vec()
        }
        SelectionMode::Density => {
            let items: Vec<Item> = admissible
                .iter()
                .map(|&i| Item {
                    id: ranked[i].candidate.id.clone(),
                    score: ranked[i].score.max(0.0),
                    length: ranked[i].candidate.tokens.max(1),
                })
                .collect();
            knapsack_select(&items, budget).into_iter().map(|j| admissible[j]).collect()
        }
    }
}

fn bundle_coherence(ranked: &[Ranked], chosen: &[usize]) -> f64 {
    let entries: Vec<(&str, f64, &EmbeddingVector)> = chosen
        .iter()
        .map(|&i| {
            let c = &ranked[i].candidate;
            (c.meta.video_id.as_str(), c.meta.start_s, &c.embedding)
        })
        .collect();
    coherence(&entries)
}

/// Picks the bundle from a reranked list.
///
/// When `coherence_tau > 0` and the bundle falls below it, the member
/// whose removal helps coherence most is excluded and selection reruns,
/// at most `max_retries` times; the most coherent attempt wins.
pub fn select_context(ranked: &[Ranked], cfg: &SelectConfig) -> ContextBundle {
    let mut excluded: HashSet<usize> = HashSet::new();
    let admissible_without = |excluded: &HashSet<usize>| -> Vec<usize> {
        let pool: Vec<usize> = (0..ranked.len()).filter(|i| !excluded.contains(i)).collect();
        let sub: Vec<Ranked> = pool.iter().map(|&i| ranked[i].clone()).collect();
        suppress_overlaps(&sub).into_iter().map(|j| pool[j]).collect()
    };
    let admissible = admissible_without(&excluded);
    let k_star = budget_k_star(
        &admissible.iter().map(|&i| ranked[i].candidate.tokens).collect::<Vec<_>>(),
        cfg.budget,
    );
    let mut chosen = choose(ranked, &admissible, cfg.mode, cfg.budget);
    let mut best_coh = bundle_coherence(ranked, &chosen);
    if cfg.coherence_tau > 0.0 {
        let mut current = chosen.clone();
        let mut coh = best_coh;
        for _ in 0..cfg.max_retries {
            if coh >= cfg.coherence_tau || current.len() < 2 {
                break;
            }
            let drop = current
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let without = |x: usize| {
                        let rest: Vec<usize> = current.iter().copied().filter(|&i| i != x).collect();
                        bundle_coherence(ranked, &rest)
                    };
                    without(a).total_cmp(&without(b)).then_with(|| a.cmp(&b))
                })
                .expect("nonempty");
            excluded.insert(drop);
            current = choose(ranked, &admissible_without(&excluded), cfg.mode, cfg.budget);
            coh = bundle_coherence(ranked, &current);
            if coh > best_coh {
                best_coh = coh;
                chosen = current.clone();
            }
        }
    }
    let mut entries: Vec<BundleEntry> = chosen
        .iter()
        .map(|&i| {
            let r = &ranked[i];
            let c = &r.candidate;
            BundleEntry {
                id: c.id.clone(),
                video_id: c.meta.video_id.clone(),
                level: c.meta.level,
                start_s: c.meta.start_s,
                end_s: c.meta.end_s,
                text: c.meta.text.clone(),
                tokens: c.tokens,
                density: c.meta.density,
                cosine: c.cosine,
                rerank: r.score,
                rank: i,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then_with(|| a.start_s.total_cmp(&b.start_s))
            .then_with(|| a.id.cmp(&b.id))
    });
    ContextBundle {
        total_tokens: entries.iter().map(|e| e.tokens).sum(),
        entries,
        budget: cfg.budget,
        k_star,
        coherence: best_coh,
        mode: cfg.mode,
    }
}

/// Renders entries sorted by (video, start), one per line.
pub fn assemble_context(entries: &[BundleEntry]) -> String {
    let mut sorted: Vec<&BundleEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then_with(|| a.start_s.total_cmp(&b.start_s))
            .then_with(|| a.id.cmp(&b.id))
    });
    sorted
        .iter()
        .map(|e| render_entry(&TimeRange::new(e.start_s, e.end_s), &e.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Full query path over a sealed index.
pub fn answer_query(
    index: &VectorIndex,
    embedder: &dyn Embedder,
    question: &str,
    cfg: &SelectConfig,
    search: SearchMode,
) -> Result<ContextBundle, SelectError> {
    let query = encode_query(embedder, question)?;
    let candidates = retrieve(index, &query, cfg.k0, search)?;
    let ranked = rerank(candidates, &query, &cfg.rerank);
    Ok(select_context(&ranked, cfg))
}
