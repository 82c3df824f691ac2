//! Average precision over framewise detections.
//!
//! Every (track, frame) pair with a ground-truth face track is one detection,
//! so localisation is perfect and only the score ranking matters. Detections
//! sharing a score form a single threshold step, so the order of tied
//! detections never affects a result.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{FrameScoreStream, SpeakingLabel};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no positive ground truth: average precision is undefined")]
    NoPositives,
    #[error("{observed} positive detections but only {declared} positives declared")]
    InconsistentPositives { declared: usize, observed: usize },
    #[error("detection {0} has a non-finite score")]
    NonFiniteScore(usize),
    #[error("no label for score stream `{0}`")]
    MissingLabels(String),
    #[error("LengthMismatch: `{id}` has {scores} scores but {labels} labels")]
    LengthMismatch {
        id: String,
        scores: usize,
        labels: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub is_positive: bool,
}

impl Detection {
    pub fn new(score: f64, is_positive: bool) -> Self {
        Self { score, is_positive }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// VOC2012 envelope AP, reported as mAP over the single speaking class.
    #[default]
    Map,
    /// Non-interpolated step-sum AP.
    Ap,
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "map" => Ok(Self::Map),
            "ap" => Ok(Self::Ap),
            other => Err(format!("unknown metric `{other}` (expected map|ap)")),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Map => "map",
            Self::Ap => "ap",
        })
    }
}

/// Precision and recall at each distinct score threshold, highest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

fn check_inputs(dets: &[Detection], n_positives: usize) -> Result<(), MetricError> {
    if n_positives == 0 {
        return Err(MetricError::NoPositives);
    }
    if let Some(i) = dets.iter().position(|d| !d.score.is_finite()) {
        return Err(MetricError::NonFiniteScore(i));
    }
    let observed = dets.iter().filter(|d| d.is_positive).count();
    if observed > n_positives {
        return Err(MetricError::InconsistentPositives {
            declared: n_positives,
            observed,
        });
    }
    Ok(())
}

pub fn pr_curve(dets: &[Detection], n_positives: usize) -> Result<PrCurve, MetricError> {
    check_inputs(dets, n_positives)?;
    let mut sorted: Vec<Detection> = dets.to_vec();
    sorted.sort_unstable_by(|a, b| b.score.total_cmp(&a.score));

    let mut curve = PrCurve::default();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].is_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(threshold);
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(tp as f64 / n_positives as f64);
    }
    Ok(curve)
}

/// VOC2012 AP: area under the monotone precision envelope, where precision
/// at recall `r` is the best precision at any recall `>= r`.
pub fn voc2012_ap(dets: &[Detection], n_positives: usize) -> Result<f64, MetricError> {
    Ok(envelope_area(&pr_curve(dets, n_positives)?))
}

fn envelope_area(curve: &PrCurve) -> f64 {
    let mut envelope = curve.precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (r, p) in curve.recall.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Step-sum AP without interpolation: `sum_k (R_k - R_{k-1}) * P_k`.
pub fn binary_ap(dets: &[Detection], n_positives: usize) -> Result<f64, MetricError> {
    let curve = pr_curve(dets, n_positives)?;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (r, p) in curve.recall.iter().zip(&curve.precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// AP of the requested kind, counting positives from the detections.
pub fn average_precision(dets: &[Detection], kind: MetricKind) -> Result<f64, MetricError> {
    let n_pos = dets.iter().filter(|d| d.is_positive).count();
    match kind {
        MetricKind::Map => voc2012_ap(dets, n_pos),
        MetricKind::Ap => binary_ap(dets, n_pos),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub ensemble: bool,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub metric: MetricKind,
    pub map: f64,
    pub binary_ap: f64,
    pub n_tracks: usize,
    pub n_detections: usize,
    pub n_positives: usize,
    pub pr_curve: PrCurve,
}

impl EvalReport {
    /// The value of the report's headline metric.
    pub fn value(&self) -> f64 {
        match self.metric {
            MetricKind::Map => self.map,
            MetricKind::Ap => self.binary_ap,
        }
    }
}

/// Pools every (track, frame) of the given streams into detections of the
/// speaking class, merged in `(clip_id, track_id, frame)` order.
///
/// Positives of labelled tracks without a stream still count towards recall.
pub fn pool_detections(
    streams: &[FrameScoreStream],
    labels: &[SpeakingLabel],
) -> Result<(Vec<Detection>, usize), MetricError> {
    let by_key: HashMap<(&str, &str), &SpeakingLabel> = labels
        .iter()
        .map(|l| ((l.clip_id.as_str(), l.track_id.as_str()), l))
        .collect();
    let mut ordered: Vec<&FrameScoreStream> = streams.iter().collect();
    ordered.sort_by(|a, b| a.key().cmp(&b.key()));

    let mut dets = Vec::with_capacity(streams.iter().map(|s| s.scores.len()).sum());
    for s in ordered {
        let label = by_key
            .get(&s.key())
            .ok_or_else(|| MetricError::MissingLabels(format!("{}/{}", s.clip_id, s.track_id)))?;
        if label.active.len() != s.scores.len() {
            return Err(MetricError::LengthMismatch {
                id: format!("{}/{}", s.clip_id, s.track_id),
                scores: s.scores.len(),
                labels: label.active.len(),
            });
        }
        dets.extend(
            s.scores
                .iter()
                .zip(&label.active)
                .map(|(&score, &is_positive)| Detection { score, is_positive }),
        );
    }
    let n_positives = labels
        .iter()
        .map(|l| l.active.iter().filter(|&&a| a).count())
        .sum();
    Ok((dets, n_positives))
}

pub fn evaluate(
    streams: &[FrameScoreStream],
    labels: &[SpeakingLabel],
    metric: MetricKind,
) -> Result<EvalReport, MetricError> {
    let (dets, n_positives) = pool_detections(streams, labels)?;
    let pr = pr_curve(&dets, n_positives)?;
    let map = envelope_area(&pr);
    let binary_ap = binary_ap(&dets, n_positives)?;
    Ok(EvalReport {
        model: None,
        ensemble: false,
        alpha: None,
        metric,
        map,
        binary_ap,
        n_tracks: streams.len(),
        n_detections: dets.len(),
        n_positives,
        pr_curve: pr,
    })
}

/// Single-number evaluation used by sweeps and stratified analyses.
pub fn score_streams(
    streams: &[FrameScoreStream],
    labels: &[SpeakingLabel],
    metric: MetricKind,
) -> Result<f64, MetricError> {
    let (dets, n_pos) = pool_detections(streams, labels)?;
    match metric {
        MetricKind::Map => voc2012_ap(&dets, n_pos),
        MetricKind::Ap => binary_ap(&dets, n_pos),
    }
}
