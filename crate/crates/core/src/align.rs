//! Audio time to video frame conversion and projection of utterance-level
//! match probabilities onto per-frame score streams.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{FaceTrack, FrameScoreStream, Record, Utterance};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("utterance `{0}` covers no frame midpoint")]
    EmptySpan(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("probability {1} for `{0}` is outside [0,1]")]
    InvalidProbability(String, f64),
}

/// Half-open frame interval `[start_frame, end_frame)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameSpan {
    pub start_frame: u64,
    pub end_frame: u64,
}

impl FrameSpan {
    pub fn new(start_frame: u64, end_frame: u64) -> Option<Self> {
        (start_frame < end_frame).then_some(Self {
            start_frame,
            end_frame,
        })
    }

    pub fn len(&self) -> u64 {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn intersect(&self, other: &FrameSpan) -> Option<FrameSpan> {
        FrameSpan::new(
            self.start_frame.max(other.start_frame),
            self.end_frame.min(other.end_frame),
        )
    }

    pub fn of_track(track: &FaceTrack) -> FrameSpan {
        FrameSpan {
            start_frame: track.start_frame,
            end_frame: track.end_frame(),
        }
    }
}

#[inline]
fn midpoint_in(f: u64, fps: f64, start_s: f64, end_s: f64) -> bool {
    let t = (f as f64 + 0.5) / fps;
    start_s <= t && t < end_s
}

/// First frame whose midpoint time is at or after `time_s`.
fn first_midpoint_at_or_after(time_s: f64, fps: f64) -> u64 {
    let mut f = (time_s * fps - 0.5).ceil().max(0.0) as u64;
    // the closed form can land one frame off under rounding; settle on the predicate
    while f > 0 && (f as f64 - 0.5) / fps >= time_s {
        f -= 1;
    }
    while (f as f64 + 0.5) / fps < time_s {
        f += 1;
    }
    f
}

/// Frames whose midpoint `(f + 0.5) / fps` lies in `[start_s, end_s)`.
pub fn time_range_to_span(start_s: f64, end_s: f64, fps: f64) -> Option<FrameSpan> {
    let lo = first_midpoint_at_or_after(start_s, fps);
    let hi = first_midpoint_at_or_after(end_s, fps);
    debug_assert!(lo >= hi || (midpoint_in(lo, fps, start_s, end_s) && midpoint_in(hi - 1, fps, start_s, end_s)));
    FrameSpan::new(lo, hi)
}

pub fn utterance_to_span(u: &Utterance, fps: f64) -> Result<FrameSpan, AlignError> {
    time_range_to_span(u.start_s, u.end_s, fps).ok_or_else(|| AlignError::EmptySpan(u.utt_id.clone()))
}

/// One face-voice matching probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub clip_id: String,
    pub utt_id: String,
    pub person_id: String,
    pub probability: f64,
}

impl Record for Match {
    const KIND: &'static str = "match";
    const KEYS: &'static [&'static str] = &["clip_id", "utt_id", "person_id", "probability"];

    fn id(&self) -> String {
        format!("{}/{}", self.utt_id, self.person_id)
    }

    fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(format!("probability {} outside [0,1]", self.probability));
        }
        Ok(())
    }
}

/// Builds the association stream of every track: each frame of a track of
/// person `s` overlapped by utterance `u` takes `P(s | u)`; overlapping
/// utterances combine by maximum; uncovered frames stay at 0.
///
/// Spans are intersected with the track extent. Output is ordered by
/// `(clip_id, track_id)`.
pub fn project_assoc(
    matches: &[Match],
    utterances: &[Utterance],
    tracks: &[FaceTrack],
    fps_of_clip: impl Fn(&str) -> Option<f64>,
) -> Result<Vec<FrameScoreStream>, AlignError> {
    let utt_by_id: HashMap<&str, &Utterance> =
        utterances.iter().map(|u| (u.utt_id.as_str(), u)).collect();

    let mut tracks_of_person: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, t) in tracks.iter().enumerate() {
        tracks_of_person
            .entry((t.clip_id.as_str(), t.person_id.as_str()))
            .or_default()
            .push(i);
    }

    let mut streams: Vec<FrameScoreStream> = tracks
        .iter()
        .map(|t| FrameScoreStream::zeros(&t.clip_id, &t.track_id, t.frame_count as usize))
        .collect();

    for m in matches {
        if !(0.0..=1.0).contains(&m.probability) {
            return Err(AlignError::InvalidProbability(m.id(), m.probability));
        }
        let u = utt_by_id
            .get(m.utt_id.as_str())
            .ok_or_else(|| AlignError::DanglingReference(format!("unknown utterance `{}`", m.utt_id)))?;
        if u.clip_id != m.clip_id {
            return Err(AlignError::DanglingReference(format!(
                "utterance `{}` belongs to clip `{}`, not `{}`",
                u.utt_id, u.clip_id, m.clip_id
            )));
        }
        let owners = tracks_of_person
            .get(&(u.clip_id.as_str(), m.person_id.as_str()))
            .ok_or_else(|| {
                AlignError::DanglingReference(format!(
                    "person `{}` has no track in clip `{}`",
                    m.person_id, u.clip_id
                ))
            })?;
        let fps = fps_of_clip(&u.clip_id)
            .ok_or_else(|| AlignError::DanglingReference(format!("unknown clip `{}`", u.clip_id)))?;
        let Some(span) = time_range_to_span(u.start_s, u.end_s, fps) else {
            continue;
        };
        for &ti in owners {
            let track = &tracks[ti];
            if let Some(overlap) = span.intersect(&FrameSpan::of_track(track)) {
                let lo = (overlap.start_frame - track.start_frame) as usize;
                let hi = (overlap.end_frame - track.start_frame) as usize;
                for s in &mut streams[ti].scores[lo..hi] {
                    *s = s.max(m.probability);
                }
            }
        }
    }

    let mut keyed: BTreeMap<(String, String), FrameScoreStream> = BTreeMap::new();
    for s in streams {
        keyed.insert((s.clip_id.clone(), s.track_id.clone()), s.with_source("assoc"));
    }
    Ok(keyed.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(id: &str, a: f64, b: f64) -> Utterance {
        Utterance {
            clip_id: "c".into(),
            utt_id: id.into(),
            start_s: a,
            end_s: b,
            speaker_hint: None,
        }
    }

    fn track(id: &str, person: &str, start: u64, count: u64) -> FaceTrack {
        FaceTrack {
            clip_id: "c".into(),
            track_id: id.into(),
            person_id: person.into(),
            start_frame: start,
            frame_count: count,
            quality: None,
        }
    }

    fn m(u: &str, p: &str, prob: f64) -> Match {
        Match {
            clip_id: "c".into(),
            utt_id: u.into(),
            person_id: p.into(),
            probability: prob,
        }
    }

    fn fps30(_: &str) -> Option<f64> {
        Some(30.0)
    }

    #[test]
    fn one_second_at_30fps() {
        let s = utterance_to_span(&utt("u", 1.0, 2.0), 30.0).unwrap();
        assert_eq!((s.start_frame, s.end_frame), (30, 60));
    }

    #[test]
    fn sub_frame_utterance_is_empty() {
        assert_eq!(
            utterance_to_span(&utt("u", 0.0, 0.01), 30.0),
            Err(AlignError::EmptySpan("u".into()))
        );
    }

    fn brute_span(a: f64, b: f64, fps: f64, n_frames: u64) -> Option<(u64, u64)> {
        let inside: Vec<u64> = (0..n_frames)
            .filter(|&f| {
                let t = (f as f64 + 0.5) / fps;
                a <= t && t < b
            })
            .collect();
        Some((*inside.first()?, *inside.last()? + 1))
    }

    proptest! {
        #[test]
        fn span_matches_midpoint_enumeration(
            a in 0.0f64..20.0,
            len in 0.0f64..5.0,
            fps in prop::sample::select(vec![24.0, 25.0, 29.97, 30.0, 60.0]),
        ) {
            let b = a + len + 1e-9;
            let n_frames = ((b + 1.0) * fps) as u64 + 2;
            let got = time_range_to_span(a, b, fps).map(|s| (s.start_frame, s.end_frame));
            prop_assert_eq!(got, brute_span(a, b, fps, n_frames));
        }

        #[test]
        fn frame_aligned_boundaries_match_enumeration(
            a in 0u64..600, len in 1u64..300,
            fps in prop::sample::select(vec![25.0, 29.97, 30.0]),
        ) {
            let (s, e) = (a as f64 / fps, (a + len) as f64 / fps);
            let got = time_range_to_span(s, e, fps).map(|x| (x.start_frame, x.end_frame));
            prop_assert_eq!(got, brute_span(s, e, fps, a + len + 10));
            prop_assert_eq!(got, Some((a, a + len)));
        }

        #[test]
        fn raising_a_probability_never_lowers_a_frame(
            p1 in 0.0f64..1.0, p2 in 0.0f64..1.0, bump in 0.0f64..1.0,
            a in 0.0f64..4.0, b in 0.0f64..4.0,
        ) {
            let utts = vec![utt("u1", a, a + 1.0), utt("u2", b, b + 0.5)];
            let tr = vec![track("t", "p", 0, 200)];
            let base = project_assoc(&[m("u1", "p", p1), m("u2", "p", p2)], &utts, &tr, fps30).unwrap();
            let raised = (p1 + bump).min(1.0);
            let up = project_assoc(&[m("u1", "p", raised), m("u2", "p", p2)], &utts, &tr, fps30).unwrap();
            for (x, y) in base[0].scores.iter().zip(&up[0].scores) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn support_and_uniformity(p in 0.01f64..1.0, a in 0.0f64..5.0, len in 0.05f64..2.0) {
            let u = utt("u", a, a + len);
            let tr = vec![track("t", "p", 10, 150)];
            let out = project_assoc(&[m("u", "p", p)], &[u.clone()], &tr, fps30).unwrap();
            let span = time_range_to_span(u.start_s, u.end_s, 30.0);
            for (i, &s) in out[0].scores.iter().enumerate() {
                let f = 10 + i as u64;
                let covered = span.is_some_and(|sp| sp.start_frame <= f && f < sp.end_frame);
                prop_assert_eq!(s, if covered { p } else { 0.0 });
            }
        }
    }

    #[test]
    fn projection_of_single_utterance() {
        let out = project_assoc(
            &[m("u", "p", 0.7)],
            &[utt("u", 1.0, 2.0)],
            &[track("t", "p", 0, 150)],
            fps30,
        )
        .unwrap();
        let s = &out[0].scores;
        assert!(s[..30].iter().all(|&v| v == 0.0));
        assert!(s[30..60].iter().all(|&v| v == 0.7));
        assert!(s[60..].iter().all(|&v| v == 0.0));
        assert_eq!(out[0].source.as_deref(), Some("assoc"));
    }

    #[test]
    fn overlapping_utterances_take_the_maximum() {
        let out = project_assoc(
            &[m("a", "p", 0.4), m("b", "p", 0.9)],
            &[utt("a", 0.0, 2.0), utt("b", 1.0, 3.0)],
            &[track("t", "p", 0, 120)],
            fps30,
        )
        .unwrap();
        let s = &out[0].scores;
        assert_eq!(s[15], 0.4);
        assert_eq!(s[45], 0.9);
        assert_eq!(s[75], 0.9);
        assert_eq!(s[100], 0.0);
    }

    #[test]
    fn no_utterances_gives_zero_streams() {
        let out = project_assoc(&[], &[], &[track("t", "p", 0, 20), track("s", "q", 5, 3)], fps30).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].track_id, "s");
        assert!(out.iter().all(|s| s.scores.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn projection_clipped_to_track_extent() {
        let out = project_assoc(
            &[m("u", "p", 0.5)],
            &[utt("u", 0.0, 10.0)],
            &[track("t", "p", 60, 30)],
            fps30,
        )
        .unwrap();
        assert_eq!(out[0].scores, vec![0.5; 30]);
    }

    #[test]
    fn other_persons_tracks_untouched() {
        let out = project_assoc(
            &[m("u", "p", 0.8)],
            &[utt("u", 0.0, 1.0)],
            &[track("t1", "p", 0, 30), track("t2", "q", 0, 30)],
            fps30,
        )
        .unwrap();
        assert_eq!(out[0].scores, vec![0.8; 30]);
        assert_eq!(out[1].scores, vec![0.0; 30]);
    }

    #[test]
    fn unknown_references_rejected() {
        let tr = [track("t", "p", 0, 30)];
        let utts = [utt("u", 0.0, 1.0)];
        assert!(matches!(
            project_assoc(&[m("nope", "p", 0.5)], &utts, &tr, fps30),
            Err(AlignError::DanglingReference(_))
        ));
        assert!(matches!(
            project_assoc(&[m("u", "ghost", 0.5)], &utts, &tr, fps30),
            Err(AlignError::DanglingReference(_))
        ));
    }
}
