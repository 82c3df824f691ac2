//! Evaluation stratified by track-level face quality, and by randomised
//! utterance masking.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{project_assoc, utterance_to_span, AlignError, FrameSpan, Match};
use crate::datamodel::{Bundle, FaceTrack, FrameScoreStream, SpeakingLabel};
use crate::fusion::{fuse_all, FusionConfig, FusionError};
use crate::metrics::{score_streams, MetricError, MetricKind};
use crate::simgen::{degrade_sync, DegradeMode, SimError, TrackSpan};

#[derive(Debug, Error)]
pub enum StrataError {
    #[error("MissingQuality: track `{0}` has no per-frame quality")]
    MissingQuality(String),
    #[error("TooFewTracks: {tracks} tracks cannot fill {bins} bins")]
    TooFewTracks { tracks: usize, bins: usize },
    #[error("invalid masking setup: {0}")]
    InvalidSetup(String),
    #[error("stratum {bin}, method `{method}`: {source}")]
    Stratum {
        bin: usize,
        method: String,
        #[source]
        source: MetricError,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Arithmetic mean of the per-frame quality scores.
pub fn track_quality(track: &FaceTrack) -> Result<f64, StrataError> {
    let id = || format!("{}/{}", track.clip_id, track.track_id);
    match track.quality.as_deref() {
        Some(q) if !q.is_empty() => Ok(q.iter().sum::<f64>() / q.len() as f64),
        _ => Err(StrataError::MissingQuality(id())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityStratum {
    pub bin_index: usize,
    /// `(clip_id, track_id)` of the member tracks.
    pub track_ids: Vec<(String, String)>,
    pub quality_lo: f64,
    pub quality_hi: f64,
    /// AP per method, in the order the methods were evaluated.
    pub ap: Vec<(String, f64)>,
}

/// Sorts tracks by `(quality, track_id, clip_id)` and cuts them into
/// `n_bins` contiguous groups whose sizes differ by at most one; the lowest
/// bins take the remainder.
pub fn stratify_by_quality(tracks: &[FaceTrack], n_bins: usize) -> Result<Vec<QualityStratum>, StrataError> {
    if n_bins == 0 || n_bins > tracks.len() {
        return Err(StrataError::TooFewTracks {
            tracks: tracks.len(),
            bins: n_bins,
        });
    }
    let mut scored = tracks
        .iter()
        .map(|t| Ok((track_quality(t)?, t)))
        .collect::<Result<Vec<_>, StrataError>>()?;
    scored.sort_by(|(qa, a), (qb, b)| {
        qa.total_cmp(qb)
            .then_with(|| a.track_id.cmp(&b.track_id))
            .then_with(|| a.clip_id.cmp(&b.clip_id))
    });
    let base = tracks.len() / n_bins;
    let extra = tracks.len() % n_bins;
    let mut out = Vec::with_capacity(n_bins);
    let mut rest = scored.as_slice();
    for bin_index in 0..n_bins {
        let size = base + usize::from(bin_index < extra);
        let (members, tail) = rest.split_at(size);
        rest = tail;
        out.push(QualityStratum {
            bin_index,
            track_ids: members
                .iter()
                .map(|(_, t)| (t.clip_id.clone(), t.track_id.clone()))
                .collect(),
            quality_lo: members.first().map(|m| m.0).unwrap_or(f64::NAN),
            quality_hi: members.last().map(|m| m.0).unwrap_or(f64::NAN),
            ap: Vec::new(),
        });
    }
    Ok(out)
}

fn subset<'a, T>(items: &'a [T], keys: &HashSet<(&str, &str)>, key: impl Fn(&T) -> (&str, &str)) -> Vec<T>
where
    T: Clone + 'a,
{
    items.iter().filter(|i| keys.contains(&key(i))).cloned().collect()
}

/// Fills each stratum's AP for every `(method, streams)` pair, restricting
/// both streams and labels to the stratum's tracks.
pub fn evaluate_strata(
    strata: &mut [QualityStratum],
    labels: &[SpeakingLabel],
    methods: &[(&str, &[FrameScoreStream])],
    metric: MetricKind,
) -> Result<(), StrataError> {
    for s in strata.iter_mut() {
        let keys: HashSet<(&str, &str)> = s
            .track_ids
            .iter()
            .map(|(c, t)| (c.as_str(), t.as_str()))
            .collect();
        let lab = subset(labels, &keys, |l| (l.clip_id.as_str(), l.track_id.as_str()));
        let mut ap = Vec::with_capacity(methods.len());
        for &(name, streams) in methods {
            let st = subset(streams, &keys, FrameScoreStream::key);
            let v = score_streams(&st, &lab, metric).map_err(|source| StrataError::Stratum {
                bin: s.bin_index,
                method: name.to_owned(),
                source,
            })?;
            ap.push((name.to_owned(), v));
        }
        s.ap = ap;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub p_mask_grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Fusion weight of the sync stream for the ensemble.
    pub alpha: f64,
    pub degrade_mode: DegradeMode,
    pub degrade_strength: f64,
    pub metric: MetricKind,
}

impl MaskingConfig {
    pub fn new(p_mask_grid: Vec<f64>, trials: usize, seed: u64, alpha: f64) -> Self {
        Self {
            p_mask_grid,
            trials,
            seed,
            alpha,
            degrade_mode: DegradeMode::Silence,
            degrade_strength: 0.5,
            metric: MetricKind::Ap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingTrial {
    pub p_mask: f64,
    pub trial: usize,
    pub rng_seed: u64,
    pub masked_utt_ids: Vec<String>,
    /// AP for `sync`, `fva` and `ensemble`, in that order.
    pub ap: Vec<(String, f64)>,
}

pub const METHODS: [&str; 3] = ["sync", "fva", "ensemble"];

/// Masks ground-truth utterances independently with probability `p_mask`.
///
/// Trial `k` draws one uniform per utterance from a generator seeded by
/// `(seed, k)`; an utterance is masked when its draw is below `p_mask`, so
/// the masked sets of one trial are nested across the grid. Masked
/// utterances lose their association scores (the diarisation front end never
/// produced them), and every track's sync stream is degraded over the masked
/// spans. `matches` holds per-utterance head outputs for the unmasked
/// bundle; since the head scores each utterance on its own, deleting an
/// utterance removes exactly its rows.
pub fn masking_experiment(
    bundle: &Bundle,
    sync: &[FrameScoreStream],
    matches: &[Match],
    cfg: &MaskingConfig,
) -> Result<Vec<MaskingTrial>, StrataError> {
    if cfg.trials == 0 {
        return Err(StrataError::InvalidSetup("trials must be at least 1".into()));
    }
    if let Some(p) = cfg.p_mask_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StrataError::InvalidSetup(format!("p_mask {p} is outside [0,1]")));
    }
    let fusion = FusionConfig::new(cfg.alpha)?;
    let fps: HashMap<&str, f64> = bundle
        .clips
        .iter()
        .map(|c| (c.clip_id.as_str(), c.video_fps))
        .collect();

    let mut utterances: Vec<_> = bundle.utterances.iter().collect();
    utterances.sort_by(|a, b| (&a.clip_id, &a.utt_id).cmp(&(&b.clip_id, &b.utt_id)));

    // track-relative frame spans each utterance covers, per track of its clip
    let mut utt_spans: Vec<Vec<TrackSpan>> = Vec::with_capacity(utterances.len());
    for u in &utterances {
        let rate = *fps
            .get(u.clip_id.as_str())
            .ok_or_else(|| AlignError::DanglingReference(format!("utterance `{}`", u.utt_id)))?;
        let span = utterance_to_span(u, rate)?;
        let spans = bundle
            .tracks
            .iter()
            .filter(|t| t.clip_id == u.clip_id)
            .filter_map(|t| {
                let hit = span.intersect(&FrameSpan::of_track(t))?;
                Some(TrackSpan {
                    clip_id: t.clip_id.clone(),
                    track_id: t.track_id.clone(),
                    span: FrameSpan::new(hit.start_frame - t.start_frame, hit.end_frame - t.start_frame)?,
                })
            })
            .collect();
        utt_spans.push(spans);
    }

    let draws: Vec<(u64, Vec<f64>)> = (0..cfg.trials)
        .map(|k| {
            let seed = trial_seed(cfg.seed, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (seed, utterances.iter().map(|_| rng.random::<f64>()).collect())
        })
        .collect();

    let jobs: Vec<(f64, usize)> = cfg
        .p_mask_grid
        .iter()
        .flat_map(|&p| (0..cfg.trials).map(move |k| (p, k)))
        .collect();
    jobs.par_iter()
        .map(|&(p_mask, k)| {
            let (rng_seed, u) = &draws[k];
            let masked: Vec<usize> = (0..utterances.len()).filter(|&i| u[i] < p_mask).collect();
            let masked_ids: HashSet<&str> = masked.iter().map(|&i| utterances[i].utt_id.as_str()).collect();
            let kept: Vec<Match> = matches
                .iter()
                .filter(|m| !masked_ids.contains(m.utt_id.as_str()))
                .cloned()
                .collect();
            let assoc = project_assoc(&kept, &bundle.utterances, &bundle.tracks, |c| fps.get(c).copied())?;
            let spans: Vec<TrackSpan> = masked.iter().flat_map(|&i| utt_spans[i].iter().cloned()).collect();
            let degraded = degrade_sync(sync, &spans, cfg.degrade_mode, cfg.degrade_strength, *rng_seed)?;
            let ensemble = fuse_all(&degraded, &assoc, fusion)?;
            let ap = [("sync", &degraded), ("fva", &assoc), ("ensemble", &ensemble)]
                .into_iter()
                .map(|(name, s)| Ok((name.to_owned(), score_streams(s, &bundle.labels, cfg.metric)?)))
                .collect::<Result<Vec<_>, StrataError>>()?;
            let mut masked_utt_ids: Vec<String> = masked_ids.into_iter().map(str::to_owned).collect();
            masked_utt_ids.sort();
            Ok(MaskingTrial {
                p_mask,
                trial: k,
                rng_seed: *rng_seed,
                masked_utt_ids,
                ap,
            })
        })
        .collect()
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng.random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingRow {
    pub p_mask: f64,
    pub method: String,
    pub ap_mean: f64,
    /// Sample standard deviation over trials; 0 for a single trial.
    pub ap_std: f64,
}

/// Mean and sample standard deviation of each method's AP per grid point,
/// in grid order then method order.
pub fn summarise(trials: &[MaskingTrial]) -> Vec<MaskingRow> {
    let mut grid: Vec<f64> = Vec::new();
    for t in trials {
        if !grid.iter().any(|&p| p == t.p_mask) {
            grid.push(t.p_mask);
        }
    }
    let mut methods: Vec<&str> = Vec::new();
    for t in trials {
        for (m, _) in &t.ap {
            if !methods.contains(&m.as_str()) {
                methods.push(m);
            }
        }
    }
    let mut rows = Vec::new();
    for &p in &grid {
        for &m in &methods {
            let values: Vec<f64> = trials
                .iter()
                .filter(|t| t.p_mask == p)
                .flat_map(|t| t.ap.iter().filter(|(name, _)| name == m).map(|&(_, v)| v))
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(MaskingRow {
                p_mask: p,
                method: m.to_owned(),
                ap_mean: mean,
                ap_std: std,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(id: &str, quality: Vec<f64>) -> FaceTrack {
        FaceTrack {
            clip_id: "c".into(),
            track_id: id.into(),
            person_id: id.into(),
            start_frame: 0,
            frame_count: quality.len() as u64,
            quality: Some(quality),
        }
    }

    #[test]
    fn quality_is_the_mean() {
        let q = track_quality(&track("a", vec![0.2, 0.4, 0.6])).unwrap();
        assert!((q - 0.4).abs() < 1e-15);
        assert_eq!(track_quality(&track("b", vec![0.3; 7])).unwrap(), 0.3);
        let mut t = track("c", vec![]);
        assert!(matches!(track_quality(&t), Err(StrataError::MissingQuality(_))));
        t.quality = None;
        assert!(track_quality(&t).is_err());
    }

    #[test]
    fn bin_sizes_follow_remainder_rule() {
        let tracks: Vec<FaceTrack> = (0..7).map(|i| track(&format!("t{i}"), vec![i as f64 / 10.0])).collect();
        let sizes = |n: usize, b: usize| -> Vec<usize> {
            stratify_by_quality(&tracks[..n], b)
                .unwrap()
                .iter()
                .map(|s| s.track_ids.len())
                .collect()
        };
        assert_eq!(sizes(6, 3), vec![2, 2, 2]);
        assert_eq!(sizes(7, 3), vec![3, 2, 2]);
        let s = stratify_by_quality(&tracks, 3).unwrap();
        assert_eq!((s[0].quality_lo, s[0].quality_hi), (0.0, 0.2));
        assert!(matches!(
            stratify_by_quality(&tracks, 8),
            Err(StrataError::TooFewTracks { tracks: 7, bins: 8 })
        ));
        assert!(stratify_by_quality(&tracks, 0).is_err());
    }

    #[test]
    fn ties_break_on_track_id() {
        let tracks = vec![track("b", vec![0.5]), track("a", vec![0.5]), track("c", vec![0.1])];
        let s = stratify_by_quality(&tracks, 3).unwrap();
        let order: Vec<&str> = s.iter().map(|s| s.track_ids[0].1.as_str()).collect();
        assert_eq!(order, vec!["c", "a", "b"]);
    }

    #[test]
    fn summary_statistics() {
        let trial = |p: f64, k: usize, v: f64| MaskingTrial {
            p_mask: p,
            trial: k,
            rng_seed: 0,
            masked_utt_ids: vec![],
            ap: vec![("fva".into(), v)],
        };
        let rows = summarise(&[trial(0.0, 0, 0.5), trial(0.0, 1, 0.7), trial(1.0, 0, 0.2)]);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].ap_mean - 0.6).abs() < 1e-15);
        assert!((rows[0].ap_std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!((rows[1].ap_mean, rows[1].ap_std), (0.2, 0.0));
    }
}
