//! Segment records, ingestion and the multi-scale segment hierarchy.
//!
//! Level 1 holds micro segments. Each higher level groups a fixed number of
//! consecutive children (the ratio of the two levels' target durations), so
//! a parent's range is exactly the union of its children's ranges. The last
//! parent of a level may hold fewer children.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

/// Boundaries closer than this (seconds) are considered equal.
pub const TIME_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("overlapping same-level ranges: {}", .0.join("; "))]
    Overlap(Vec<String>),
    #[error("micro coverage of video {video_id:?} is not contiguous: gap at {at_s} s")]
    Gap { video_id: String, at_s: f64 },
    #[error("invalid scale config: {0}")]
    Scale(String),
    #[error("hierarchy input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeRange {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn overlaps(&self, other: &TimeRange) -> bool {
        self.start_s < other.end_s - TIME_EPS && other.start_s < self.end_s - TIME_EPS
    }

    fn key(&self) -> (i64, i64) {
        (millis(self.start_s), millis(self.end_s))
    }
}

fn millis(s: f64) -> i64 {
    (s * 1000.0).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityText {
    pub modality: Modality,
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub video_id: String,
    pub level: usize,
    pub range: TimeRange,
    pub texts: Vec<ModalityText>,
    pub fused_text: Option<String>,
}

impl Segment {
    pub fn text_for(&self, modality: Modality) -> Option<&str> {
        self.texts.iter().find(|t| t.modality == modality).map(|t| t.text.as_str())
    }

    /// Caption (visual) text or "".
    pub fn caption(&self) -> &str {
        self.text_for(Modality::Visual).unwrap_or("")
    }

    /// Transcript (audio) text or "".
    pub fn transcript(&self) -> &str {
        self.text_for(Modality::Audio).unwrap_or("")
    }

    /// All modality texts joined in modality order.
    pub fn raw_text(&self) -> String {
        let parts: Vec<&str> = self
            .texts
            .iter()
            .map(|t| t.text.trim())
            .filter(|t| !t.is_empty())
            .collect();
        parts.join(" ")
    }

    /// Fused text when present, otherwise the raw text.
    pub fn content(&self) -> String {
        match &self.fused_text {
            Some(t) if !t.trim().is_empty() => t.clone(),
            _ => self.raw_text(),
        }
    }
}

/// One line of segment JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub video_id: String,
    pub level: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub modality: Modality,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// One line of the shot-transition sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotTransition {
    pub video_id: String,
    pub t_s: f64,
}

/// Segment id derived from position: `video_id:level:index`.
pub fn segment_id(video_id: &str, level: usize, index: usize) -> String {
    format!("{video_id}:{level}:{index}")
}

fn validate_record(rec: &SegmentRecord) -> Result<(), String> {
    if rec.video_id.is_empty() {
        return Err("empty video_id".into());
    }
    if rec.level == 0 {
        return Err("level must be >= 1".into());
    }
    if !(rec.start_s.is_finite() && rec.end_s.is_finite()) || rec.start_s < 0.0 {
        return Err("start_s must be a finite value >= 0".into());
    }
    if rec.end_s <= rec.start_s {
        return Err(format!("end_s {} must exceed start_s {}", rec.end_s, rec.start_s));
    }
    if rec.text.trim().is_empty() {
        return Err("empty text".into());
    }
    if let Some(c) = rec.confidence {
        if !(0.0..=1.0).contains(&c) {
            return Err(format!("confidence {c} outside [0, 1]"));
        }
    }
    Ok(())
}

/// Parses segment JSONL, one record per non-blank line.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<SegmentRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SegmentRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        validate_record(&rec).map_err(|message| CorpusError::Malformed { line: i + 1, message })?;
        out.push(rec);
    }
    Ok(out)
}

/// Parses the shot-transition sidecar.
pub fn read_shots<R: BufRead>(reader: R) -> Result<Vec<ShotTransition>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ShotTransition = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        out.push(s);
    }
    Ok(out)
}

/// Parses and ingests segment JSONL.
pub fn ingest_segments<R: BufRead>(reader: R) -> Result<Vec<Segment>, CorpusError> {
    segments_from_records(read_records(reader)?)
}

/// Groups records into segments.
///
/// Records sharing `(video_id, level, range)` become one segment; each
/// modality appears once in its `texts`, repeated same-modality records are
/// appended to that entry's text (space separated, minimum confidence).
/// Output is sorted by `(video_id, level, start_s)` and ids are assigned
/// from that position.
pub fn segments_from_records(records: Vec<SegmentRecord>) -> Result<Vec<Segment>, CorpusError> {
    type Key = (String, usize, i64, i64);
    let mut groups: BTreeMap<Key, (TimeRange, Vec<ModalityText>)> = BTreeMap::new();
    for rec in records {
        let range = TimeRange::new(rec.start_s, rec.end_s);
        let (s, e) = range.key();
        let entry = groups
            .entry((rec.video_id, rec.level, s, e))
            .or_insert_with(|| (range, Vec::new()));
        let confidence = rec.confidence.unwrap_or(1.0);
        match entry.1.iter_mut().find(|t| t.modality == rec.modality) {
            Some(t) => {
                t.text = format!("{} {}", t.text, rec.text.trim());
                t.confidence = t.confidence.min(confidence);
            }
            None => entry.1.push(ModalityText { modality: rec.modality, text: rec.text.trim().to_string(), confidence }),
        }
    }

    let mut out: Vec<Segment> = Vec::with_capacity(groups.len());
    let mut offenders = Vec::new();
    let mut index = 0;
    let mut prev: Option<(String, usize)> = None;
    for ((video_id, level, _, _), (range, mut texts)) in groups {
        let same_track = prev.as_ref().is_some_and(|(v, l)| *v == video_id && *l == level);
        if !same_track {
            index = 0;
        }
        if same_track {
            let last = out.last().expect("previous segment in track");
            if last.range.overlaps(&range) {
                offenders.push(format!(
                    "{video_id} level {level}: [{}, {}) overlaps [{}, {})",
                    last.range.start_s, last.range.end_s, range.start_s, range.end_s
                ));
            }
        }
        texts.sort_by_key(|t| t.modality);
        out.push(Segment {
            id: segment_id(&video_id, level, index),
            video_id: video_id.clone(),
            level,
            range,
            texts,
            fused_text: None,
        });
        index += 1;
        prev = Some((video_id, level));
    }
    if !offenders.is_empty() {
        return Err(CorpusError::Overlap(offenders));
    }
    Ok(out)
}

/// Segments back to records, one per modality text.
pub fn segments_to_records(segments: &[Segment]) -> Vec<SegmentRecord> {
    segments
        .iter()
        .flat_map(|s| {
            s.texts.iter().map(move |t| SegmentRecord {
                video_id: s.video_id.clone(),
                level: s.level,
                start_s: s.range.start_s,
                end_s: s.range.end_s,
                modality: t.modality,
                text: t.text.clone(),
                confidence: Some(t.confidence),
            })
        })
        .collect()
}

pub fn write_records<W: Write>(mut w: W, records: &[SegmentRecord]) -> Result<(), CorpusError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn serialize_segments<W: Write>(w: W, segments: &[Segment]) -> Result<(), CorpusError> {
    write_records(w, &segments_to_records(segments))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelScale {
    pub target_s: f64,
    /// Allowed deviation of a micro segment's duration from `target_s`.
    /// Only level 1 is checked; parents may be partial tails.
    pub tolerance_s: f64,
}

/// Per-level target durations, finest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub levels: Vec<LevelScale>,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self::from_durations(&[3.0, 30.0, 180.0]).expect("default ladder is valid")
    }
}

impl ScaleConfig {
    /// Ladder with tolerance of 2/3 of each target (3 s gives 1-5 s).
    pub fn from_durations(durations: &[f64]) -> Result<Self, CorpusError> {
        let cfg = Self {
            levels: durations
                .iter()
                .map(|&d| LevelScale { target_s: d, tolerance_s: d * 2.0 / 3.0 })
                .collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Checks positivity and that every level is a whole multiple (>= 1)
    /// of the level below.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.levels.is_empty() {
            return Err(CorpusError::Scale("no levels".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if !(l.target_s.is_finite() && l.target_s > 0.0) {
                return Err(CorpusError::Scale(format!("level {} target must be > 0", i + 1)));
            }
            if !(l.tolerance_s.is_finite() && l.tolerance_s >= 0.0) {
                return Err(CorpusError::Scale(format!("level {} tolerance must be >= 0", i + 1)));
            }
        }
        for i in 1..self.levels.len() {
            let ratio = self.levels[i].target_s / self.levels[i - 1].target_s;
            if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-6 {
                return Err(CorpusError::Scale(format!(
                    "level {} ({} s) is not a whole multiple of level {} ({} s)",
                    i + 1,
                    self.levels[i].target_s,
                    i,
                    self.levels[i - 1].target_s
                )));
            }
        }
        Ok(())
    }

    /// Children per parent at `level` (2-based).
    pub fn group_factor(&self, level: usize) -> usize {
        (self.levels[level - 1].target_s / self.levels[level - 2].target_s).round() as usize
    }
}

/// Parent/child tree over the segments of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentHierarchy {
    pub video_id: String,
    /// `levels[l - 1]` holds level `l`, ordered by start time.
    pub levels: Vec<Vec<Segment>>,
    pub child_map: BTreeMap<String, Vec<String>>,
    pub parent_map: BTreeMap<String, String>,
    positions: HashMap<String, (usize, usize)>,
}

impl SegmentHierarchy {
    pub fn new(
        video_id: String,
        levels: Vec<Vec<Segment>>,
        child_map: BTreeMap<String, Vec<String>>,
        parent_map: BTreeMap<String, String>,
    ) -> Self {
        let mut h = Self { video_id, levels, child_map, parent_map, positions: HashMap::new() };
        h.reindex();
        h
    }

    fn reindex(&mut self) {
        self.positions.clear();
        for (l, segs) in self.levels.iter().enumerate() {
            for (i, s) in segs.iter().enumerate() {
                self.positions.insert(s.id.clone(), (l + 1, i));
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> &[Segment] {
        &self.levels[level - 1]
    }

    /// `(level, index within level)` of a segment.
    pub fn position(&self, id: &str) -> Option<(usize, usize)> {
        self.positions.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Segment> {
        let (l, i) = self.position(id)?;
        self.levels[l - 1].get(i)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Segment> {
        let (l, i) = self.position(id)?;
        self.levels[l - 1].get_mut(i)
    }

    pub fn children(&self, id: &str) -> &[String] {
        self.child_map.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn parent(&self, id: &str) -> Option<&str> {
        self.parent_map.get(id).map(String::as_str)
    }

    pub fn roots(&self) -> &[Segment] {
        self.levels.last().map_or(&[], Vec::as_slice)
    }

    /// Same-level segments adjacent to `id` that share its parent. Roots
    /// are all siblings of one another.
    pub fn neighbors(&self, id: &str) -> Vec<&str> {
        let Some((l, i)) = self.position(id) else {
            return Vec::new();
        };
        let segs = &self.levels[l - 1];
        let parent = self.parent(id);
        [i.checked_sub(1), Some(i + 1)]
            .into_iter()
            .flatten()
            .filter_map(|j| segs.get(j))
            .filter(|s| self.parent(&s.id) == parent)
            .map(|s| s.id.as_str())
            .collect()
    }

    /// Every segment, finest level first.
    pub fn iter(&self) -> impl Iterator<Item = &Segment> {
        self.levels.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the hierarchy of one video from its contiguous micro segments.
pub fn build_hierarchy(micro: &[Segment], cfg: &ScaleConfig) -> Result<SegmentHierarchy, CorpusError> {
    cfg.validate()?;
    let Some(first) = micro.first() else {
        return Err(CorpusError::Input("no micro segments".into()));
    };
    let video_id = first.video_id.clone();
    let band = cfg.levels[0];
    for (i, s) in micro.iter().enumerate() {
        if s.video_id != video_id {
            return Err(CorpusError::Input(format!("mixed videos {video_id:?} and {:?}", s.video_id)));
        }
        if s.level != 1 {
            return Err(CorpusError::Input(format!("segment {} has level {}, expected 1", s.id, s.level)));
        }
        if (s.range.duration() - band.target_s).abs() > band.tolerance_s + TIME_EPS {
            return Err(CorpusError::Input(format!(
                "micro segment {} lasts {} s, outside {} ± {} s",
                s.id,
                s.range.duration(),
                band.target_s,
                band.tolerance_s
            )));
        }
        if i > 0 {
            let prev = &micro[i - 1];
            if (s.range.start_s - prev.range.end_s).abs() > TIME_EPS {
                return Err(CorpusError::Gap { video_id, at_s: prev.range.end_s.min(s.range.start_s) });
            }
        }
    }

    let mut levels: Vec<Vec<Segment>> = Vec::with_capacity(cfg.depth());
    levels.push(
        micro
            .iter()
            .enumerate()
            .map(|(i, s)| Segment { id: segment_id(&video_id, 1, i), ..s.clone() })
            .collect(),
    );
    let mut child_map = BTreeMap::new();
    let mut parent_map = BTreeMap::new();
    for level in 2..=cfg.depth() {
        let factor = cfg.group_factor(level);
        let below = &levels[level - 2];
        let mut parents = Vec::with_capacity(below.len().div_ceil(factor));
        for (i, group) in below.chunks(factor).enumerate() {
            let id = segment_id(&video_id, level, i);
            let range = TimeRange::new(group[0].range.start_s, group[group.len() - 1].range.end_s);
            let kids: Vec<String> = group.iter().map(|c| c.id.clone()).collect();
            for k in &kids {
                parent_map.insert(k.clone(), id.clone());
            }
            child_map.insert(id.clone(), kids);
            parents.push(Segment {
                id,
                video_id: video_id.clone(),
                level,
                range,
                texts: Vec::new(),
                fused_text: None,
            });
        }
        levels.push(parents);
    }
    Ok(SegmentHierarchy::new(video_id, levels, child_map, parent_map))
}

/// Builds one hierarchy per video from ingested level-1 segments; other
/// levels are ignored.
pub fn build_hierarchies(segments: &[Segment], cfg: &ScaleConfig) -> Result<Vec<SegmentHierarchy>, CorpusError> {
    let mut by_video: BTreeMap<&str, Vec<Segment>> = BTreeMap::new();
    for s in segments.iter().filter(|s| s.level == 1) {
        by_video.entry(&s.video_id).or_default().push(s.clone());
    }
    by_video
        .into_values()
        .map(|mut micro| {
            micro.sort_by(|a, b| a.range.start_s.total_cmp(&b.range.start_s));
            build_hierarchy(&micro, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Children leave `[at_s, until_s)` of the parent uncovered.
    Gap { parent: String, at_s: f64, until_s: f64 },
    Overlap { parent: String, at_s: f64 },
    /// A non-root segment with no parent, or a parent with no children.
    Orphan { id: String },
    /// `child_map` and `parent_map` disagree, or reference unknown ids.
    MapInconsistency { detail: String },
    /// Child not at exactly one level below its parent.
    LevelMismatch { parent: String, child: String },
}

/// Lists every violated structural invariant; empty when well formed.
pub fn validate_hierarchy(h: &SegmentHierarchy) -> Vec<Violation> {
    let mut report = Vec::new();
    let depth = h.depth();

    for (parent, kids) in &h.child_map {
        if h.get(parent).is_none() {
            report.push(Violation::MapInconsistency { detail: format!("child_map key {parent} is not a segment") });
        }
        for k in kids {
            match h.parent_map.get(k) {
                Some(p) if p == parent => {}
                Some(p) => report.push(Violation::MapInconsistency {
                    detail: format!("{k} listed under {parent} but parent_map says {p}"),
                }),
                None => report.push(Violation::MapInconsistency {
                    detail: format!("{k} listed under {parent} but has no parent_map entry"),
                }),
            }
        }
    }
    for (child, parent) in &h.parent_map {
        if h.get(child).is_none() {
            report.push(Violation::MapInconsistency { detail: format!("parent_map key {child} is not a segment") });
        }
        if !h.children(parent).contains(child) {
            report.push(Violation::MapInconsistency {
                detail: format!("parent_map says {child} -> {parent} but {parent} does not list it"),
            });
        }
    }

    for (l, segs) in h.levels.iter().enumerate() {
        let level = l + 1;
        for s in segs {
            if level < depth && h.parent(&s.id).is_none() {
                report.push(Violation::Orphan { id: s.id.clone() });
            }
            if level > 1 && h.children(&s.id).is_empty() {
                report.push(Violation::Orphan { id: s.id.clone() });
            }
        }
    }

    for (parent_id, kids) in &h.child_map {
        let Some(parent) = h.get(parent_id) else { continue };
        let mut ranges: Vec<TimeRange> = Vec::new();
        for k in kids {
            let Some(child) = h.get(k) else {
                report.push(Violation::MapInconsistency { detail: format!("{parent_id} lists unknown child {k}") });
                continue;
            };
            if child.level + 1 != parent.level {
                report.push(Violation::LevelMismatch { parent: parent_id.clone(), child: k.clone() });
            }
            ranges.push(child.range);
        }
        if ranges.is_empty() {
            continue;
        }
        ranges.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let mut cursor = parent.range.start_s;
        for r in &ranges {
            if r.start_s > cursor + TIME_EPS {
                report.push(Violation::Gap { parent: parent_id.clone(), at_s: cursor, until_s: r.start_s });
            } else if r.start_s < cursor - TIME_EPS {
                report.push(Violation::Overlap { parent: parent_id.clone(), at_s: r.start_s });
            }
            cursor = cursor.max(r.end_s);
        }
        if cursor < parent.range.end_s - TIME_EPS {
            report.push(Violation::Gap { parent: parent_id.clone(), at_s: cursor, until_s: parent.range.end_s });
        } else if cursor > parent.range.end_s + TIME_EPS {
            report.push(Violation::Overlap { parent: parent_id.clone(), at_s: parent.range.end_s });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(video: &str, start: f64, end: f64, modality: Modality, text: &str) -> SegmentRecord {
        SegmentRecord {
            video_id: video.into(),
            level: 1,
            start_s: start,
            end_s: end,
            modality,
            text: text.into(),
            confidence: None,
        }
    }

    fn micro(video: &str, n: usize, dur: f64) -> Vec<Segment> {
        let recs = (0..n)
            .map(|i| rec(video, i as f64 * dur, (i + 1) as f64 * dur, Modality::Visual, &format!("frame {i}")))
            .collect();
        segments_from_records(recs).unwrap()
    }

    #[test]
    fn empty_stream() {
        assert!(ingest_segments("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn merges_modalities_of_one_range() {
        let text = r#"{"video_id":"v","level":1,"start_s":0,"end_s":3,"modality":"audio","text":"hello","confidence":0.5}
{"video_id":"v","level":1,"start_s":0,"end_s":3,"modality":"visual","text":"a dog"}
"#;
        let segs = ingest_segments(text.as_bytes()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].texts.len(), 2);
        assert_eq!(segs[0].caption(), "a dog");
        assert_eq!(segs[0].texts[0].confidence, 1.0);
        assert_eq!(segs[0].transcript(), "hello");
        assert_eq!(segs[0].texts[1].confidence, 0.5);
        assert_eq!(segs[0].id, "v:1:0");
    }

    #[test]
    fn same_modality_records_concatenate() {
        let segs = segments_from_records(vec![
            rec("v", 0.0, 3.0, Modality::Audio, "one"),
            rec("v", 0.0, 3.0, Modality::Audio, "two"),
        ])
        .unwrap();
        assert_eq!(segs[0].texts.len(), 1);
        assert_eq!(segs[0].transcript(), "one two");
    }

    #[test]
    fn sixty_micro_records() {
        assert_eq!(micro("v", 60, 3.0).len(), 60);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"video_id\":\"v\",\"level\":1,\"start_s\":0,\"end_s\":3,\"modality\":\"audio\",\"text\":\"x\"}\n\nnot json\n";
        match ingest_segments(text.as_bytes()) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad_range = "{\"video_id\":\"v\",\"level\":1,\"start_s\":3,\"end_s\":3,\"modality\":\"audio\",\"text\":\"x\"}";
        assert!(matches!(ingest_segments(bad_range.as_bytes()), Err(CorpusError::Malformed { line: 1, .. })));
        let empty_text = "{\"video_id\":\"v\",\"level\":1,\"start_s\":0,\"end_s\":3,\"modality\":\"audio\",\"text\":\"  \"}";
        assert!(matches!(ingest_segments(empty_text.as_bytes()), Err(CorpusError::Malformed { line: 1, .. })));
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let err = segments_from_records(vec![
            rec("v", 0.0, 3.0, Modality::Audio, "a"),
            rec("v", 2.0, 5.0, Modality::Audio, "b"),
            rec("w", 2.0, 5.0, Modality::Audio, "other video is fine"),
        ])
        .unwrap_err();
        match err {
            CorpusError::Overlap(list) => assert_eq!(list.len(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hierarchy_60_6_1() {
        let h = build_hierarchy(&micro("v", 60, 3.0), &ScaleConfig::default()).unwrap();
        let counts: Vec<usize> = h.levels.iter().map(Vec::len).collect();
        assert_eq!(counts, vec![60, 6, 1]);
        assert!(validate_hierarchy(&h).is_empty());
        assert_eq!(h.children("v:3:0").len(), 6);
        assert_eq!(h.parent("v:1:59"), Some("v:2:5"));
        assert_eq!(h.roots()[0].range, TimeRange::new(0.0, 180.0));
        assert!(h.level(2).iter().all(|s| s.texts.is_empty() && s.fused_text.is_none()));
    }

    #[test]
    fn degenerate_single_segment_ladder() {
        let cfg = ScaleConfig::from_durations(&[3.0, 3.0, 3.0]).unwrap();
        let h = build_hierarchy(&micro("v", 1, 3.0), &cfg).unwrap();
        assert_eq!(h.levels.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 1, 1]);
        assert!(validate_hierarchy(&h).is_empty());
    }

    #[test]
    fn partial_tail_group() {
        let h = build_hierarchy(&micro("v", 59, 3.0), &ScaleConfig::default()).unwrap();
        let meso = h.level(2);
        assert_eq!(meso.len(), 6);
        assert!((meso[5].range.duration() - 27.0).abs() < 1e-9);
        assert_eq!(h.children(&meso[5].id).len(), 9);
        assert!((h.roots()[0].range.end_s - 177.0).abs() < 1e-9);
        assert!(validate_hierarchy(&h).is_empty());
    }

    #[test]
    fn gap_in_micro_coverage() {
        let mut m = micro("v", 5, 3.0);
        m.remove(2);
        match build_hierarchy(&m, &ScaleConfig::default()) {
            Err(CorpusError::Gap { at_s, .. }) => assert!((at_s - 6.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_band_micro_rejected() {
        let m = micro("v", 3, 10.0);
        assert!(matches!(build_hierarchy(&m, &ScaleConfig::default()), Err(CorpusError::Input(_))));
    }

    #[test]
    fn scale_config_validation() {
        assert!(ScaleConfig::from_durations(&[3.0, 30.0, 180.0]).is_ok());
        assert!(ScaleConfig::from_durations(&[3.0, 10.0]).is_err());
        assert!(ScaleConfig::from_durations(&[30.0, 3.0]).is_err());
        assert!(ScaleConfig::from_durations(&[]).is_err());
        assert!(ScaleConfig::from_durations(&[0.0]).is_err());
    }

    #[test]
    fn map_inconsistency_is_reported_once() {
        let mut h = build_hierarchy(&micro("v", 60, 3.0), &ScaleConfig::default()).unwrap();
        h.child_map.get_mut("v:2:0").unwrap().retain(|c| c != "v:1:3");
        let report = validate_hierarchy(&h);
        let n = report.iter().filter(|v| matches!(v, Violation::MapInconsistency { .. })).count();
        assert_eq!(n, 1, "{report:?}");
    }

    #[test]
    fn gap_entry_at_27s() {
        let mut h = build_hierarchy(&micro("v", 60, 3.0), &ScaleConfig::default()).unwrap();
        // Parent [0, 30) whose children only cover [0, 27).
        h.child_map.get_mut("v:2:0").unwrap().pop();
        h.parent_map.remove("v:1:9");
        h.parent_map.insert("v:1:9".into(), "v:2:1".into());
        h.child_map.get_mut("v:2:1").unwrap().insert(0, "v:1:9".into());
        let report = validate_hierarchy(&h);
        assert!(report.contains(&Violation::Gap { parent: "v:2:0".into(), at_s: 27.0, until_s: 30.0 }), "{report:?}");
    }

    #[test]
    fn orphan_detected() {
        let mut h = build_hierarchy(&micro("v", 20, 3.0), &ScaleConfig::default()).unwrap();
        h.parent_map.remove("v:1:19");
        h.child_map.get_mut("v:2:1").unwrap().retain(|c| c != "v:1:19");
        let report = validate_hierarchy(&h);
        assert!(report.contains(&Violation::Orphan { id: "v:1:19".into() }));
    }

    #[test]
    fn neighbors_stay_within_parent() {
        let h = build_hierarchy(&micro("v", 60, 3.0), &ScaleConfig::default()).unwrap();
        assert_eq!(h.neighbors("v:1:0"), vec!["v:1:1"]);
        assert_eq!(h.neighbors("v:1:9"), vec!["v:1:8"]);
        assert_eq!(h.neighbors("v:1:10"), vec!["v:1:11"]);
        assert_eq!(h.neighbors("v:2:2"), vec!["v:2:1", "v:2:3"]);
        assert!(h.neighbors("v:3:0").is_empty());
    }

    #[test]
    fn build_is_deterministic_and_per_video() {
        let mut all = micro("a", 20, 3.0);
        all.extend(micro("b", 12, 3.0));
        let hs = build_hierarchies(&all, &ScaleConfig::default()).unwrap();
        assert_eq!(hs.len(), 2);
        assert_eq!(hs, build_hierarchies(&all, &ScaleConfig::default()).unwrap());
        assert_eq!(hs[1].level(2).len(), 2);
    }

    proptest! {
        #[test]
        fn serialize_then_ingest_is_identity(
            spec in proptest::collection::vec((1usize..3, 0u8..3, "[a-z]{1,8}( [a-z]{1,8}){0,3}"), 1..30)
        ) {
            let mut recs = Vec::new();
            for (i, (level, mods, text)) in spec.iter().enumerate() {
                let start = i as f64 * 3.0;
                for m in [Modality::Visual, Modality::Audio] {
                    let keep = match mods { 0 => m == Modality::Visual, 1 => m == Modality::Audio, _ => true };
                    if keep {
                        recs.push(SegmentRecord {
                            video_id: format!("v{}", i % 2),
                            level: *level,
                            start_s: start,
                            end_s: start + 3.0,
                            modality: m,
                            text: text.clone(),
                            confidence: Some(0.75),
                        });
                    }
                }
            }
            let segs = segments_from_records(recs).unwrap();
            let mut buf = Vec::new();
            serialize_segments(&mut buf, &segs).unwrap();
            let back = ingest_segments(buf.as_slice()).unwrap();
            prop_assert_eq!(back, segs);
        }

        #[test]
        fn generated_hierarchies_tile(n in 1usize..200) {
            let h = build_hierarchy(&micro("v", n, 3.0), &ScaleConfig::default()).unwrap();
            prop_assert!(validate_hierarchy(&h).is_empty());
            prop_assert_eq!(h.level(2).len(), n.div_ceil(10));
        }
    }
}
