//! Transcript cleanup: confidence filtering, grouping into sentence-like
//! units and snapping unit boundaries to visual shot changes.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, Modality, SegmentRecord, ShotTransition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptChunk {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
    /// Mean confidence of the merged utterances.
    pub confidence: f64,
    /// Set when every merged utterance has the same speaker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub tau_conf: f64,
    pub gap_s: f64,
    pub snap_tolerance_s: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { tau_conf: 0.5, gap_s: 1.5, snap_tolerance_s: 1.0 }
    }
}

/// Extension points for model-backed cleanup steps. Every default is the
/// identity.
pub trait TranscriptHooks {
    fn rescore(&self, utterances: Vec<Utterance>) -> Vec<Utterance> {
        utterances
    }

    fn normalize_entities(&self, utterances: Vec<Utterance>) -> Vec<Utterance> {
        utterances
    }

    fn disambiguate_homophones(&self, utterances: Vec<Utterance>) -> Vec<Utterance> {
        utterances
    }

    fn diarize(&self, chunks: Vec<TranscriptChunk>) -> Vec<TranscriptChunk> {
        chunks
    }

    fn correct_terminology(&self, chunks: Vec<TranscriptChunk>) -> Vec<TranscriptChunk> {
        chunks
    }
}

/// The identity hooks.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl TranscriptHooks for NoHooks {}

fn ends_sentence(text: &str) -> bool {
    text.trim_end().ends_with(['.', '!', '?'])
}

/// Groups consecutive utterances separated by less than `gap_s`; a unit
/// also ends after an utterance that ends a sentence.
pub fn merge_units(utterances: &[Utterance], gap_s: f64) -> Vec<TranscriptChunk> {
    let mut out: Vec<TranscriptChunk> = Vec::new();
    let mut group: Vec<&Utterance> = Vec::new();
    let flush = |group: &mut Vec<&Utterance>, out: &mut Vec<TranscriptChunk>| {
        if group.is_empty() {
            return;
        }
        let text = group.iter().map(|u| u.text.trim()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" ");
        let speaker = group[0].speaker.clone().filter(|s| group.iter().all(|u| u.speaker.as_deref() == Some(s)));
        out.push(TranscriptChunk {
            text,
            start_s: group[0].start_s,
            end_s: group.iter().map(|u| u.end_s).fold(f64::NEG_INFINITY, f64::max),
            confidence: group.iter().map(|u| u.confidence).sum::<f64>() / group.len() as f64,
            speaker,
        });
        group.clear();
    };
    for u in utterances {
        if let Some(last) = group.last() {
            if u.start_s - last.end_s >= gap_s || ends_sentence(&last.text) {
                flush(&mut group, &mut out);
            }
        }
        group.push(u);
    }
    flush(&mut group, &mut out);
    out
}

/// Nearest shot time within `tolerance` of `t` (earlier shot on ties).
pub fn nearest_shot(t: f64, shots: &[f64], tolerance: f64) -> Option<f64> {
    shots
        .iter()
        .copied()
        .filter(|s| (s - t).abs() <= tolerance + 1e-9)
        .min_by(|a, b| (a - t).abs().total_cmp(&(b - t).abs()).then_with(|| a.total_cmp(b)))
}

/// Moves chunk boundaries onto nearby shot changes while keeping chunks
/// ordered, non-overlapping and of positive length.
pub fn snap_to_shots(chunks: &mut [TranscriptChunk], shots: &[f64], tolerance: f64) {
    let mut prev_end = f64::NEG_INFINITY;
    for c in chunks.iter_mut() {
        let snapped = nearest_shot(c.start_s, shots, tolerance).unwrap_or(c.start_s);
        let start = if snapped >= prev_end { snapped } else { c.start_s.max(prev_end) };
        let snapped = nearest_shot(c.end_s, shots, tolerance).unwrap_or(c.end_s);
        let end = if snapped > start {
            snapped
        } else if c.end_s > start {
            c.end_s
        } else {
            start + (c.end_s - c.start_s).max(1e-3)
        };
        c.start_s = start;
        c.end_s = end;
        prev_end = end;
    }
}

/// Filters, groups and aligns one video's utterances (sorted by start).
pub fn refine_transcript(
    utterances: &[Utterance],
    shots: &[f64],
    cfg: &RefineConfig,
    hooks: &dyn TranscriptHooks,
) -> Vec<TranscriptChunk> {
    let kept: Vec<Utterance> = utterances.iter().filter(|u| u.confidence > cfg.tau_conf).cloned().collect();
    let kept = hooks.disambiguate_homophones(hooks.normalize_entities(hooks.rescore(kept)));
    let mut chunks = merge_units(&kept, cfg.gap_s);
    let mut shots = shots.to_vec();
    shots.sort_by(f64::total_cmp);
    snap_to_shots(&mut chunks, &shots, cfg.snap_tolerance_s);
    hooks.correct_terminology(hooks.diarize(chunks))
}

/// Level-1 audio records for `video_id`.
pub fn chunks_to_records(video_id: &str, chunks: &[TranscriptChunk]) -> Vec<SegmentRecord> {
    chunks
        .iter()
        .map(|c| SegmentRecord {
            video_id: video_id.to_string(),
            level: 1,
            start_s: c.start_s,
            end_s: c.end_s,
            modality: Modality::Audio,
            text: c.text.clone(),
            confidence: Some(c.confidence),
        })
        .collect()
}

pub fn read_utterances<R: BufRead>(reader: R) -> Result<Vec<Utterance>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        if !(u.end_s > u.start_s) {
            return Err(CorpusError::Malformed { line: i + 1, message: "end_s must exceed start_s".into() });
        }
        out.push(u);
    }
    out.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(out)
}

/// Shot times of one video, ascending.
pub fn shots_for(video_id: &str, shots: &[ShotTransition]) -> Vec<f64> {
    let mut t: Vec<f64> = shots.iter().filter(|s| s.video_id == video_id).map(|s| s.t_s).collect();
    t.sort_by(f64::total_cmp);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmodel::token_count;
    use proptest::prelude::*;

    fn utt(text: &str, start: f64, end: f64, c: f64) -> Utterance {
        Utterance { text: text.into(), start_s: start, end_s: end, confidence: c, speaker: None }
    }

    #[test]
    fn sentence_runs_merge() {
        let us = [utt("so the", 0.0, 1.0, 0.9), utt("plan is", 1.0, 2.0, 0.9), utt("simple.", 2.0, 3.0, 0.9), utt("next we", 3.0, 4.0, 0.9), utt("go home.", 4.0, 5.0, 0.9)];
        let out = refine_transcript(&us, &[], &RefineConfig::default(), &NoHooks);
        let texts: Vec<&str> = out.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["so the plan is simple.", "next we go home."]);
        assert_eq!((out[0].start_s, out[0].end_s), (0.0, 3.0));
    }

    #[test]
    fn low_confidence_dropped() {
        let us = [utt("keep", 0.0, 1.0, 0.9), utt("noise", 1.0, 2.0, 0.2), utt("also", 2.0, 3.0, 0.5)];
        let out = refine_transcript(&us, &[], &RefineConfig::default(), &NoHooks);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "keep");
    }

    #[test]
    fn gaps_split_units() {
        let us = [utt("a", 0.0, 1.0, 0.9), utt("b", 2.5, 3.0, 0.9), utt("c", 3.2, 4.0, 0.9)];
        let out = refine_transcript(&us, &[], &RefineConfig::default(), &NoHooks);
        let texts: Vec<&str> = out.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["a", "b c"]);
    }

    #[test]
    fn boundary_snaps_to_shot() {
        let us = [utt("first part.", 20.0, 29.6, 0.9), utt("second part.", 31.5, 40.0, 0.9)];
        let out = refine_transcript(&us, &[30.0], &RefineConfig::default(), &NoHooks);
        assert_eq!(out[0].end_s, 30.0);
        // 31.5 is 1.5 s from the shot: out of tolerance.
        assert_eq!(out[1].start_s, 31.5);
    }

    #[test]
    fn snapping_never_collapses_a_chunk() {
        let us = [utt("short.", 29.5, 30.4, 0.9), utt("after.", 30.45, 32.0, 0.9)];
        let out = refine_transcript(&us, &[30.0], &RefineConfig::default(), &NoHooks);
        assert!(out.iter().all(|c| c.end_s > c.start_s));
        assert!(out[0].end_s <= out[1].start_s);
    }

    #[test]
    fn speakers_kept_when_uniform() {
        let mut a = utt("hi", 0.0, 1.0, 0.9);
        let mut b = utt("there.", 1.0, 2.0, 0.9);
        a.speaker = Some("s1".into());
        b.speaker = Some("s1".into());
        assert_eq!(merge_units(&[a.clone(), b.clone()], 1.5)[0].speaker.as_deref(), Some("s1"));
        b.speaker = Some("s2".into());
        assert_eq!(merge_units(&[a, b], 1.5)[0].speaker, None);
    }

    struct Upper;

    impl TranscriptHooks for Upper {
        fn correct_terminology(&self, chunks: Vec<TranscriptChunk>) -> Vec<TranscriptChunk> {
            chunks.into_iter().map(|c| TranscriptChunk { text: c.text.to_uppercase(), ..c }).collect()
        }
    }

    #[test]
    fn hooks_are_applied() {
        let out = refine_transcript(&[utt("abc", 0.0, 1.0, 0.9)], &[], &RefineConfig::default(), &Upper);
        assert_eq!(out[0].text, "ABC");
    }

    #[test]
    fn records_are_audio_level_one() {
        let out = refine_transcript(&[utt("abc", 0.0, 1.0, 0.9)], &[], &RefineConfig::default(), &NoHooks);
        let recs = chunks_to_records("v", &out);
        assert_eq!(recs[0].modality, Modality::Audio);
        assert_eq!(recs[0].level, 1);
        assert_eq!(recs[0].confidence, Some(0.9));
    }

    #[test]
    fn reads_utterances() {
        let text = "{\"text\":\"b\",\"start_s\":2,\"end_s\":3,\"confidence\":0.8}\n{\"text\":\"a\",\"start_s\":0,\"end_s\":1,\"confidence\":0.9,\"speaker\":\"x\"}\n";
        let us = read_utterances(text.as_bytes()).unwrap();
        assert_eq!(us[0].text, "a");
        assert!(read_utterances("{\"text\":\"a\",\"start_s\":1,\"end_s\":1,\"confidence\":0.9}".as_bytes()).is_err());
    }

    fn utterances() -> impl Strategy<Value = Vec<Utterance>> {
        prop::collection::vec((0.0f64..3.0, 0.2f64..4.0, 0.0f64..1.0, 1usize..5, any::<bool>()), 0..30).prop_map(|parts| {
            let mut t = 0.0;
            parts
                .into_iter()
                .enumerate()
                .map(|(i, (gap, len, c, words, stop))| {
                    let start = t + gap;
                    t = start + len;
                    let text = (0..words).map(|w| format!("w{i}x{w}")).collect::<Vec<_>>().join(" ") + if stop { "." } else { "" };
                    utt(&text, start, t, c)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn chunks_ordered_and_disjoint(us in utterances(), shots in prop::collection::vec(0.0f64..120.0, 0..20)) {
            let out = refine_transcript(&us, &shots, &RefineConfig::default(), &NoHooks);
            for c in &out {
                prop_assert!(c.end_s > c.start_s);
            }
            for w in out.windows(2) {
                prop_assert!(w[0].end_s <= w[1].start_s);
            }
        }

        #[test]
        fn raising_threshold_never_adds_tokens(us in utterances(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let count = |tau: f64| {
                let cfg = RefineConfig { tau_conf: tau, ..Default::default() };
                refine_transcript(&us, &[], &cfg, &NoHooks).iter().map(|c| token_count(&c.text)).sum::<usize>()
            };
            prop_assert!(count(hi) <= count(lo));
        }

        #[test]
        fn content_is_preserved(us in utterances()) {
            let cfg = RefineConfig { gap_s: f64::INFINITY, ..Default::default() };
            let out = refine_transcript(&us, &[], &cfg, &NoHooks);
            let joined = out.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join(" ");
            let expected = us.iter().filter(|u| u.confidence > 0.5).map(|u| u.text.as_str()).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(joined, expected);
        }
    }
}
