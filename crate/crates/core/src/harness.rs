//! Synthetic long-video corpora with planted needles, and end-to-end
//! evaluation against their ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{read_records, segment_id, segments_from_records, write_records, CorpusError, Modality, SegmentRecord, TIME_EPS};
use crate::pipeline::{build_index, BuildStats, PipelineError, QueryEngine};
use crate::select::{BundleEntry, ContextBundle};
use crate::textmodel::tokenize;

pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const TRUTH_FILE: &str = "ground_truth.json";
pub const SPEC_FILE: &str = "spec.json";

/// Tokens per generated needle.
pub const NEEDLE_TOKENS: usize = 12;
/// Minimum share of needle tokens kept by a query paraphrase.
pub const MIN_QUERY_OVERLAP: f64 = 0.6;

const STOPWORDS: &[&str] = &["the", "a", "of", "near", "with", "by", "on", "and"];
const QUESTION_LEADS: &[&[&str]] = &[
    &["when", "does"],
    &["find", "where"],
    &["which", "moment", "shows"],
    &["at", "what", "time", "is"],
    &["locate"],
];
const SYLLABLE_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"];
const SYLLABLE_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ae", "io"];

const DEFAULT_TOPICS: &[&[&str]] = &[
    &["kitchen", "onion", "pan", "knife", "stir", "garlic", "simmer", "sauce", "chef", "pepper", "oil", "chop", "boil", "pot", "salt", "heat", "taste", "spoon", "butter", "plate"],
    &["river", "boat", "paddle", "shore", "current", "fish", "bank", "reeds", "bridge", "water", "rapids", "canoe", "rope", "dock", "mist", "stone", "bend", "willow", "heron", "splash"],
    &["engine", "bolt", "wrench", "garage", "piston", "tire", "mechanic", "grease", "hood", "valve", "gear", "axle", "spark", "jack", "torque", "belt", "filter", "hose", "clamp", "oilcan"],
    &["classroom", "teacher", "board", "chalk", "student", "lesson", "desk", "equation", "notebook", "question", "answer", "homework", "ruler", "graph", "lecture", "exam", "pencil", "theorem", "diagram", "bell"],
    &["forest", "trail", "pine", "hiker", "moss", "deer", "branch", "leaves", "path", "backpack", "ridge", "summit", "fern", "owl", "trunk", "campfire", "tent", "boots", "map", "creek"],
    &["market", "stall", "vendor", "fruit", "crowd", "basket", "price", "coins", "bread", "cheese", "awning", "cart", "flowers", "scale", "olives", "bargain", "honey", "spices", "street", "bag"],
    &["stadium", "ball", "player", "goal", "referee", "whistle", "crowd", "pitch", "kick", "coach", "jersey", "score", "defender", "pass", "corner", "bench", "header", "keeper", "sprint", "fans"],
    &["studio", "guitar", "drum", "singer", "microphone", "chord", "melody", "amplifier", "mixer", "rhythm", "bass", "tempo", "lyrics", "headphones", "cable", "speaker", "piano", "verse", "chorus", "riff"],
];

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("needles {first} and {second} collide in video {video} at slot {slot}")]
    NeedleCollision { video: usize, slot: usize, first: usize, second: usize },
    #[error("no index to evaluate against")]
    MissingIndex,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeedleModality {
    Visual,
    Audio,
    /// First half in the caption, second half in the transcript.
    Split,
}

/// One planned needle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleSpec {
    /// Generated when absent.
    #[serde(default)]
    pub text: Option<String>,
    pub modality: NeedleModality,
    #[serde(default)]
    pub video: usize,
    pub position_s: f64,
    /// Index of a second needle queried together with this one.
    #[serde(default)]
    pub pair_with: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub videos: usize,
    pub duration_s: f64,
    pub micro_s: f64,
    /// Word pools; empty selects the built-in pools.
    pub topics: Vec<Vec<String>>,
    /// Chance that a filler segment repeats an earlier filler verbatim.
    pub repeat_rate: f64,
    /// Explicitly placed needles.
    pub needles: Vec<NeedleSpec>,
    /// Needles placed at random free slots, by kind.
    pub single_needles: usize,
    pub cross_modal_needles: usize,
    pub needle_pairs: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            videos: 1,
            duration_s: 3600.0,
            micro_s: 3.0,
            topics: Vec::new(),
            repeat_rate: 0.3,
            needles: Vec::new(),
            single_needles: 0,
            cross_modal_needles: 0,
            needle_pairs: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn slots(&self) -> usize {
        (self.duration_s / self.micro_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Spec(m));
        if self.videos == 0 {
            return bad("videos must be >= 1".into());
        }
        if !(self.micro_s > 0.0 && self.duration_s >= self.micro_s) {
            return bad("need 0 < micro_s <= duration_s".into());
        }
        if (self.slots() as f64 * self.micro_s - self.duration_s).abs() > TIME_EPS {
            return bad(format!("duration {} is not a multiple of micro_s {}", self.duration_s, self.micro_s));
        }
        if !(0.0..=1.0).contains(&self.repeat_rate) {
            return bad("repeat_rate must lie in [0, 1]".into());
        }
        if self.topics.iter().any(|t| t.is_empty()) {
            return bad("topic pools must be non-empty".into());
        }
        let mut partner: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, n) in self.needles.iter().enumerate() {
            if n.video >= self.videos {
                return bad(format!("needle {i}: video {} out of range", n.video));
            }
            if !(n.position_s >= 0.0 && n.position_s < self.duration_s) {
                return bad(format!("needle {i}: position {} outside [0, {})", n.position_s, self.duration_s));
            }
            if let Some(t) = &n.text {
                let min = if n.modality == NeedleModality::Split { 2 } else { 1 };
                if tokenize(t).len() < min {
                    return bad(format!("needle {i}: text needs at least {min} tokens"));
                }
            }
            if let Some(j) = n.pair_with {
                if j == i || j >= self.needles.len() {
                    return bad(format!("needle {i}: bad pair_with {j}"));
                }
                for (a, b) in [(i, j), (j, i)] {
                    if partner.get(&a).is_some_and(|&p| p != b) {
                        return bad(format!("needle {a} paired more than once"));
                    }
                    partner.insert(a, b);
                }
            }
        }
        let mut taken: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (i, n) in self.needles.iter().enumerate() {
            let slot = (n.position_s / self.micro_s).floor() as usize;
            if let Some(&first) = taken.get(&(n.video, slot)) {
                return Err(HarnessError::NeedleCollision { video: n.video, slot, first, second: i });
            }
            taken.insert((n.video, slot), i);
        }
        let free = self.videos * self.slots() - self.needles.len();
        let wanted = self.single_needles + self.cross_modal_needles + 2 * self.needle_pairs;
        if wanted > free {
            return bad(format!("{wanted} random needles but only {free} free slots"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Single,
    CrossModal,
    Pair,
}

/// Text that must appear, contiguously, in one bundle entry covering the range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleRef {
    pub segment_id: String,
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub modality: Modality,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthQuery {
    pub id: String,
    pub query: String,
    pub kind: QueryKind,
    /// Share of needle tokens present in the query.
    pub overlap: f64,
    pub needles: Vec<NeedleRef>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub queries: Vec<GroundTruthQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<SegmentRecord>,
    pub truth: GroundTruth,
}

struct Planted {
    video: usize,
    slot: usize,
    modality: NeedleModality,
    tokens: Vec<String>,
    /// Planted text; the joined tokens unless given explicitly.
    text: String,
    pair_with: Option<usize>,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(SYLLABLE_ONSETS.choose(rng).unwrap());
        w.push_str(SYLLABLE_VOWELS.choose(rng).unwrap());
    }
    if rng.random_bool(0.5) {
        w.push_str(["n", "r", "x", "l"].choose(rng).unwrap());
    }
    w
}

fn needle_tokens(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(NEEDLE_TOKENS);
    for k in 0..NEEDLE_TOKENS {
        if k % 3 == 1 {
            out.push(STOPWORDS.choose(rng).unwrap().to_string());
            continue;
        }
        loop {
            let w = pseudo_word(rng);
            if used.insert(w.clone()) {
                out.push(w);
                break;
            }
        }
    }
    out
}

/// Filler text for one modality of one slot.
fn filler(rng: &mut ChaCha8Rng, pool: &[String], modality: Modality) -> String {
    let n = rng.random_range(6..=9);
    let mut words: Vec<&str> = Vec::with_capacity(n + 3);
    words.push(match modality {
        Modality::Visual => "a",
        Modality::Audio => "we",
    });
    for k in 0..n {
        words.push(&pool[rng.random_range(0..pool.len())]);
        if k == 2 {
            words.push(STOPWORDS[rng.random_range(0..STOPWORDS.len())]);
        }
    }
    words.join(" ")
}

/// Keeps at least `MIN_QUERY_OVERLAP` of the tokens, in order, behind a question lead.
fn paraphrase(rng: &mut ChaCha8Rng, tokens: &[String]) -> (Vec<String>, usize) {
    let keep = ((tokens.len() as f64 * (MIN_QUERY_OVERLAP + 0.05)).ceil() as usize).clamp(1, tokens.len());
    let mut idx: Vec<usize> = (0..tokens.len()).collect();
    idx.shuffle(rng);
    idx.truncate(keep);
    idx.sort_unstable();
    let lead = QUESTION_LEADS.choose(rng).unwrap();
    let mut q: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    q.extend(idx.iter().map(|&i| tokens[i].clone()));
    (q, keep)
}

fn video_name(v: usize) -> String {
    format!("video{v:03}")
}

/// Generates a corpus and its ground truth. Deterministic per spec.
pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pools: Vec<Vec<String>> = if spec.topics.is_empty() {
        DEFAULT_TOPICS.iter().map(|t| t.iter().map(|w| w.to_string()).collect()).collect()
    } else {
        spec.topics.clone()
    };
    let vocabulary: BTreeSet<String> = pools.iter().flatten().flat_map(|w| tokenize(w)).collect();
    let slots = spec.slots();

    // Needle plan: explicit needles first, then random ones at free slots.
    let mut used_words = vocabulary.clone();
    let mut planted: Vec<Planted> = Vec::new();
    let mut occupied: BTreeSet<(usize, usize)> = BTreeSet::new();
    for n in &spec.needles {
        let slot = (n.position_s / spec.micro_s).floor() as usize;
        occupied.insert((n.video, slot));
        let (tokens, text) = match &n.text {
            Some(t) => (tokenize(t), t.trim().to_string()),
            None => {
                let tokens = needle_tokens(&mut rng, &mut used_words);
                let text = tokens.join(" ");
                (tokens, text)
            }
        };
        planted.push(Planted { video: n.video, slot, modality: n.modality, tokens, text, pair_with: n.pair_with });
    }
    for i in 0..planted.len() {
        if let Some(j) = planted[i].pair_with {
            planted[j].pair_with = Some(i);
        }
    }
    let free_slot = |rng: &mut ChaCha8Rng, video: usize, lo: usize, hi: usize, occupied: &mut BTreeSet<(usize, usize)>| {
        let free: Vec<usize> = (lo..hi).filter(|s| !occupied.contains(&(video, *s))).collect();
        let s = *free.choose(rng)?;
        occupied.insert((video, s));
        Some(s)
    };
    let no_room = || HarnessError::Spec("not enough free slots for random needles".into());
    for (count, modality) in [(spec.single_needles, None), (spec.cross_modal_needles, Some(NeedleModality::Split))] {
        for _ in 0..count {
            let first = rng.random_range(0..spec.videos);
            let (video, slot) = (0..spec.videos)
                .map(|k| (first + k) % spec.videos)
                .find_map(|v| free_slot(&mut rng, v, 0, slots, &mut occupied).map(|s| (v, s)))
                .ok_or_else(no_room)?;
            let modality = modality.unwrap_or(if rng.random_bool(0.5) { NeedleModality::Visual } else { NeedleModality::Audio });
            let tokens = needle_tokens(&mut rng, &mut used_words);
            let text = tokens.join(" ");
            planted.push(Planted { video, slot, modality, tokens, text, pair_with: None });
        }
    }
    for _ in 0..spec.needle_pairs {
        // Long range: one needle in each half of the same video.
        let video = rng.random_range(0..spec.videos);
        let half = slots / 2;
        let a = free_slot(&mut rng, video, 0, half.max(1), &mut occupied).ok_or_else(no_room)?;
        let b = free_slot(&mut rng, video, half, slots, &mut occupied).ok_or_else(no_room)?;
        let first = planted.len();
        for (slot, partner) in [(a, first + 1), (b, first)] {
            let modality = if rng.random_bool(0.5) { NeedleModality::Visual } else { NeedleModality::Audio };
            let tokens = needle_tokens(&mut rng, &mut used_words);
            let text = tokens.join(" ");
            planted.push(Planted { video, slot, modality, tokens, text, pair_with: Some(partner) });
        }
    }
    let at: BTreeMap<(usize, usize), usize> = planted.iter().enumerate().map(|(i, p)| ((p.video, p.slot), i)).collect();

    // Filler with topic scenes and verbatim repeats.
    let mut records = Vec::with_capacity(spec.videos * slots * 2);
    for v in 0..spec.videos {
        let vid = video_name(v);
        let mut topic = rng.random_range(0..pools.len());
        let mut scene_left = 0usize;
        let mut history: Vec<(String, String)> = Vec::new();
        for s in 0..slots {
            if scene_left == 0 {
                topic = (topic + rng.random_range(1..pools.len().max(2))) % pools.len();
                scene_left = rng.random_range(10..=60);
            }
            scene_left -= 1;
            let needle = at.get(&(v, s)).map(|&i| &planted[i]);
            let repeat = needle.is_none() && !history.is_empty() && rng.random_bool(spec.repeat_rate);
            let (mut caption, mut transcript) = if repeat {
                let from = history.len().saturating_sub(20);
                history[rng.random_range(from..history.len())].clone()
            } else {
                let pair = (filler(&mut rng, &pools[topic], Modality::Visual), filler(&mut rng, &pools[topic], Modality::Audio));
                if needle.is_none() {
                    history.push(pair.clone());
                }
                pair
            };
            if let Some(p) = needle {
                let (first, second) = p.tokens.split_at(p.tokens.len() / 2);
                match p.modality {
                    NeedleModality::Visual => caption = p.text.clone(),
                    NeedleModality::Audio => transcript = p.text.clone(),
                    NeedleModality::Split => {
                        caption = first.join(" ");
                        transcript = second.join(" ");
                    }
                }
            }
            let (start, end) = (s as f64 * spec.micro_s, (s + 1) as f64 * spec.micro_s);
            for (modality, text) in [(Modality::Visual, caption), (Modality::Audio, transcript)] {
                records.push(SegmentRecord { video_id: vid.clone(), level: 1, start_s: start, end_s: end, modality, text, confidence: None });
            }
        }
    }

    // Ground truth, one query per needle or needle pair.
    let reference = |p: &Planted| -> Vec<NeedleRef> {
        let vid = video_name(p.video);
        let make = |modality: Modality, text: String| NeedleRef {
            segment_id: segment_id(&vid, 1, p.slot),
            video_id: vid.clone(),
            start_s: p.slot as f64 * spec.micro_s,
            end_s: (p.slot + 1) as f64 * spec.micro_s,
            modality,
            text,
        };
        let (first, second) = p.tokens.split_at(p.tokens.len() / 2);
        match p.modality {
            NeedleModality::Visual => vec![make(Modality::Visual, p.text.clone())],
            NeedleModality::Audio => vec![make(Modality::Audio, p.text.clone())],
            NeedleModality::Split => vec![make(Modality::Visual, first.join(" ")), make(Modality::Audio, second.join(" "))],
        }
    };
    let mut queries = Vec::new();
    for (i, p) in planted.iter().enumerate() {
        let (kind, members): (QueryKind, Vec<&Planted>) = match p.pair_with {
            Some(j) if j < i => continue,
            Some(j) => (QueryKind::Pair, vec![p, &planted[j]]),
            None if p.modality == NeedleModality::Split => (QueryKind::CrossModal, vec![p]),
            None => (QueryKind::Single, vec![p]),
        };
        let all: Vec<String> = members.iter().flat_map(|m| m.tokens.iter().cloned()).collect();
        let mut words = Vec::new();
        let mut kept = 0;
        for (k, m) in members.iter().enumerate() {
            let (q, n) = paraphrase(&mut rng, &m.tokens);
            // Only the first member keeps its question lead.
            let skip = if k == 0 { 0 } else { q.len() - n };
            words.extend(q.into_iter().skip(skip));
            kept += n;
        }
        queries.push(GroundTruthQuery {
            id: format!("q{:04}", queries.len()),
            query: words.join(" "),
            kind,
            overlap: kept as f64 / all.len() as f64,
            needles: members.iter().flat_map(|m| reference(m)).collect(),
        });
    }
    Ok(SynthCorpus { records, truth: GroundTruth { queries } })
}

/// Writes `segments.jsonl`, `ground_truth.json` and `spec.json` into `dir`.
pub fn write_corpus(dir: &Path, spec: &SynthSpec, corpus: &SynthCorpus) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_records(BufWriter::new(fs::File::create(dir.join(SEGMENTS_FILE))?), &corpus.records)?;
    fs::write(dir.join(TRUTH_FILE), serde_json::to_string_pretty(&corpus.truth)?)?;
    fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<SynthCorpus, HarnessError> {
    let records = read_records(std::io::BufReader::new(fs::File::open(dir.join(SEGMENTS_FILE))?))?;
    let truth = serde_json::from_str(&fs::read_to_string(dir.join(TRUTH_FILE))?)?;
    Ok(SynthCorpus { records, truth })
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// An entry holds a needle when it covers the needle's range and carries its text verbatim.
pub fn entry_holds(entry: &BundleEntry, needle: &NeedleRef) -> bool {
    entry.video_id == needle.video_id
        && entry.start_s <= needle.start_s + TIME_EPS
        && entry.end_s >= needle.end_s - TIME_EPS
        && contains_run(&tokenize(&entry.text), &tokenize(&needle.text))
}

fn all_found<'a>(entries: impl Iterator<Item = &'a BundleEntry> + Clone, needles: &[NeedleRef]) -> bool {
    needles.iter().all(|n| entries.clone().any(|e| entry_holds(e, n)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub id: String,
    pub kind: QueryKind,
    /// Every needle among the `k` best-ranked bundle entries.
    pub hit_at_k: bool,
    /// Every needle somewhere in the bundle.
    pub in_bundle: bool,
    pub tokens: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
            max_ms: *s.last().unwrap(),
        }
    }
}

/// Rates are `None` when no query of that kind exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub queries: usize,
    /// Single-needle queries with the needle in the top k.
    pub recall_at_k: Option<f64>,
    /// Single-needle queries with the needle anywhere in the bundle.
    pub bundle_recall: Option<f64>,
    pub cross_modal_recall: Option<f64>,
    pub both_needle_recall: Option<f64>,
    /// Mean of bundle tokens over budget.
    pub budget_utilization: f64,
    pub compression_ratio: Option<f64>,
    pub latency: LatencyStats,
    pub outcomes: Vec<QueryOutcome>,
}

fn rate(outcomes: &[QueryOutcome], kind: QueryKind, hit: impl Fn(&QueryOutcome) -> bool) -> Option<f64> {
    let of_kind: Vec<&QueryOutcome> = outcomes.iter().filter(|o| o.kind == kind).collect();
    (!of_kind.is_empty()).then(|| of_kind.iter().filter(|o| hit(o)).count() as f64 / of_kind.len() as f64)
}

fn score_bundle(q: &GroundTruthQuery, bundle: &ContextBundle, k: usize) -> (bool, bool) {
    let top = bundle.top(k);
    (all_found(top.iter().copied(), &q.needles), all_found(bundle.entries.iter(), &q.needles))
}

/// Runs every ground-truth query through the engine.
pub fn evaluate(engine: &QueryEngine, truth: &GroundTruth, k: usize) -> Result<EvalReport, HarnessError> {
    if engine.index.is_empty() {
        return Err(HarnessError::MissingIndex);
    }
    let outcomes: Vec<QueryOutcome> = truth
        .queries
        .par_iter()
        .map(|q| {
            let r = engine.query(&q.query)?;
            let (hit_at_k, in_bundle) = score_bundle(q, &r.bundle, k);
            Ok(QueryOutcome {
                id: q.id.clone(),
                kind: q.kind,
                hit_at_k,
                in_bundle,
                tokens: r.bundle.total_tokens,
                latency_ms: r.latency_ms,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let budget = engine.config.budget;
    let utilization = if budget == 0 || outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().map(|o| o.tokens as f64 / budget as f64).sum::<f64>() / outcomes.len() as f64
    };
    let latencies: Vec<f64> = outcomes.iter().map(|o| o.latency_ms).collect();
    Ok(EvalReport {
        k,
        queries: outcomes.len(),
        recall_at_k: rate(&outcomes, QueryKind::Single, |o| o.hit_at_k),
        bundle_recall: rate(&outcomes, QueryKind::Single, |o| o.in_bundle),
        cross_modal_recall: rate(&outcomes, QueryKind::CrossModal, |o| o.in_bundle),
        both_needle_recall: rate(&outcomes, QueryKind::Pair, |o| o.in_bundle),
        budget_utilization: utilization,
        compression_ratio: None,
        latency: LatencyStats::from_samples(&latencies),
        outcomes,
    })
}

/// Builds an index over the corpus and evaluates it.
pub fn evaluate_corpus(corpus: &SynthCorpus, cfg: &Config) -> Result<(EvalReport, BuildStats), HarnessError> {
    let segments = segments_from_records(corpus.records.clone())?;
    let built = build_index(&segments, cfg, None)?;
    let engine = QueryEngine::new(built.index, cfg.clone());
    let mut report = evaluate(&engine, &corpus.truth, cfg.recall_k)?;
    report.compression_ratio = Some(built.stats.dedup.compression_ratio());
    Ok((report, built.stats))
}
