//! Framewise weighted-mean late fusion and the empirical sweep of its mixing
//! coefficient.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{FrameScoreStream, SpeakingLabel};
use crate::metrics::{score_streams, MetricError, MetricKind};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("alpha {0} is outside [0,1]")]
    InvalidAlpha(f64),
    #[error("LengthMismatch: `{id}` has {sync} sync frames and {assoc} assoc frames")]
    LengthMismatch {
        id: String,
        sync: usize,
        assoc: usize,
    },
    #[error("TrackMismatch: sync stream `{sync}` paired with assoc stream `{assoc}`")]
    TrackMismatch { sync: String, assoc: String },
    #[error("assoc stream `{0}` has no matching sync stream")]
    MissingSync(String),
    #[error("alpha grid is empty")]
    EmptyGrid,
    #[error("bad grid `{0}`: {1}")]
    BadGrid(String, String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    alpha: f64,
}

impl FusionConfig {
    pub fn new(alpha: f64) -> Result<Self, FusionError> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Self { alpha })
        } else {
            Err(FusionError::InvalidAlpha(alpha))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// `alpha * sync + (1 - alpha) * assoc`, elementwise.
///
/// The result is clamped into `[min, max]` of its two inputs; the clamp only
/// removes last-ulp rounding excursions and leaves both endpoints bit-exact.
#[inline]
pub fn fuse_value(sync: f64, assoc: f64, alpha: f64) -> f64 {
    let v = alpha * sync + (1.0 - alpha) * assoc;
    v.clamp(sync.min(assoc), sync.max(assoc))
}

pub fn fuse(
    sync: &FrameScoreStream,
    assoc: &FrameScoreStream,
    cfg: FusionConfig,
) -> Result<FrameScoreStream, FusionError> {
    if sync.key() != assoc.key() {
        return Err(FusionError::TrackMismatch {
            sync: format!("{}/{}", sync.clip_id, sync.track_id),
            assoc: format!("{}/{}", assoc.clip_id, assoc.track_id),
        });
    }
    if sync.scores.len() != assoc.scores.len() {
        return Err(FusionError::LengthMismatch {
            id: format!("{}/{}", sync.clip_id, sync.track_id),
            sync: sync.scores.len(),
            assoc: assoc.scores.len(),
        });
    }
    let scores = sync
        .scores
        .iter()
        .zip(&assoc.scores)
        .map(|(&s, &a)| fuse_value(s, a, cfg.alpha))
        .collect();
    Ok(FrameScoreStream {
        clip_id: sync.clip_id.clone(),
        track_id: sync.track_id.clone(),
        scores,
        source: Some("ensemble".into()),
    })
}

/// Fuses every sync stream with its association stream. Tracks without an
/// association stream (person never diarised) fuse against all zeros.
pub fn fuse_all(
    sync: &[FrameScoreStream],
    assoc: &[FrameScoreStream],
    cfg: FusionConfig,
) -> Result<Vec<FrameScoreStream>, FusionError> {
    let assoc_by_key: HashMap<(&str, &str), &FrameScoreStream> =
        assoc.iter().map(|s| (s.key(), s)).collect();
    let sync_keys: std::collections::HashSet<(&str, &str)> = sync.iter().map(|s| s.key()).collect();
    if let Some(orphan) = assoc.iter().find(|a| !sync_keys.contains(&a.key())) {
        return Err(FusionError::MissingSync(format!("{}/{}", orphan.clip_id, orphan.track_id)));
    }
    sync.par_iter()
        .map(|s| match assoc_by_key.get(&s.key()) {
            Some(a) => fuse(s, a, cfg),
            None => fuse(s, &FrameScoreStream::zeros(&s.clip_id, &s.track_id, s.scores.len()), cfg),
        })
        .collect()
}

/// 0.00 to 1.00 in steps of 0.05.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Parses `start:stop:step` (inclusive of `stop`) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, FusionError> {
    let bad = |msg: &str| FusionError::BadGrid(text.to_owned(), msg.to_owned());
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(&e.to_string()));
    let values = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, stop, step] = parts.as_slice() else {
            return Err(bad("expected start:stop:step"));
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || stop < start {
            return Err(bad("need step > 0 and stop >= start"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // round away accumulated binary error so 0.1 * 3 prints as 0.3
        (0..=n)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() {
        return Err(FusionError::EmptyGrid);
    }
    if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(FusionError::InvalidAlpha(v));
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub metric: MetricKind,
    pub table: Vec<SweepRow>,
    pub best_alpha: f64,
    pub best_score: f64,
}

/// Evaluates the fused streams at every grid point. The best alpha is the
/// highest-scoring one; ties go to the smaller alpha.
pub fn sweep_alpha(
    labels: &[SpeakingLabel],
    sync: &[FrameScoreStream],
    assoc: &[FrameScoreStream],
    grid: &[f64],
    metric: MetricKind,
) -> Result<SweepResult, FusionError> {
    if grid.is_empty() {
        return Err(FusionError::EmptyGrid);
    }
    let configs = grid
        .iter()
        .map(|&a| FusionConfig::new(a))
        .collect::<Result<Vec<_>, _>>()?;
    let table = configs
        .iter()
        .map(|&cfg| {
            let fused = fuse_all(sync, assoc, cfg)?;
            Ok(SweepRow {
                alpha: cfg.alpha,
                score: score_streams(&fused, labels, metric)?,
            })
        })
        .collect::<Result<Vec<_>, FusionError>>()?;
    let best = table
        .iter()
        .fold(None::<&SweepRow>, |best, row| match best {
            None => Some(row),
            Some(b) if row.score > b.score || (row.score == b.score && row.alpha < b.alpha) => Some(row),
            keep => keep,
        })
        .expect("grid is non-empty");
    Ok(SweepResult {
        metric,
        best_alpha: best.alpha,
        best_score: best.score,
        table,
    })
}
