//! Seeded synthetic conversations: speech activity, face tracks with
//! fluctuating quality, speaker/face embeddings and synthetic sync scores.
//!
//! Every person has a latent identity vector. Voice and face embeddings are
//! that vector mapped through two fixed modality matrices (shared by all
//! bundles with the same `world_seed`) and renormalised, so a head trained
//! on one bundle transfers to another.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::FrameSpan;
use crate::datamodel::{
    Bundle, ClipMeta, FaceEmbeddingTrack, FaceTrack, FrameScoreStream, SpeakingLabel, Utterance,
    UtteranceEmbedding,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("SpanOutOfRange: {id} has {len} frames, span is [{start}, {end})")]
    SpanOutOfRange {
        id: String,
        len: usize,
        start: u64,
        end: u64,
    },
    #[error("config file: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Seeds the voice/face modality matrices.
    pub world_seed: u64,
    pub n_clips: usize,
    pub identities_min: usize,
    pub identities_max: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub spurt_on_mean_s: f64,
    pub spurt_off_mean_s: f64,
    /// Probability that a spurt due while someone else talks starts anyway
    /// instead of waiting for the floor.
    pub overlap_rate: f64,
    pub d_speaker: usize,
    pub d_face: usize,
    pub d_latent: usize,
    /// Visible fraction of the clip per track is drawn from `[visible_min, 1]`.
    pub visible_min: f64,
    pub quality_lo: f64,
    pub quality_hi: f64,
    pub quality_rho: f64,
    pub quality_sigma: f64,
    pub audio_noise: f64,
    pub overlap_penalty: f64,
    pub face_noise: f64,
    pub sync_gain: f64,
    pub sync_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world_seed: 0,
            n_clips: 40,
            identities_min: 2,
            identities_max: 4,
            duration_s: 60.0,
            fps: 30.0,
            spurt_on_mean_s: 2.0,
            spurt_off_mean_s: 4.0,
            overlap_rate: 0.1,
            d_speaker: 16,
            d_face: 16,
            d_latent: 8,
            visible_min: 0.6,
            quality_lo: 0.05,
            quality_hi: 0.95,
            quality_rho: 0.95,
            quality_sigma: 0.05,
            audio_noise: 0.2,
            overlap_penalty: 1.0,
            face_noise: 0.5,
            sync_gain: 4.0,
            sync_noise: 1.5,
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: &str| Err(SimError::InvalidConfig(m.to_owned()));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.n_clips == 0 {
            return fail("n_clips must be positive");
        }
        if self.identities_min == 0 || self.identities_min > self.identities_max {
            return fail("need 1 <= identities_min <= identities_max");
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) || !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail("duration_s and fps must be positive");
        }
        if !(self.spurt_on_mean_s * self.fps >= 1.0) || !(self.spurt_off_mean_s * self.fps >= 1.0) {
            return fail("mean spurt durations must cover at least one frame");
        }
        if !unit(self.overlap_rate) {
            return fail("overlap_rate must be in [0,1]");
        }
        if self.d_speaker == 0 || self.d_face == 0 || self.d_latent == 0 {
            return fail("embedding dimensions must be positive");
        }
        if !(self.visible_min > 0.0 && self.visible_min <= 1.0) {
            return fail("visible_min must be in (0,1]");
        }
        if !unit(self.quality_lo) || !unit(self.quality_hi) || self.quality_lo > self.quality_hi {
            return fail("need 0 <= quality_lo <= quality_hi <= 1");
        }
        if !unit(self.quality_rho) {
            return fail("quality_rho must be in [0,1]");
        }
        for (name, v) in [
            ("quality_sigma", self.quality_sigma),
            ("audio_noise", self.audio_noise),
            ("overlap_penalty", self.overlap_penalty),
            ("face_noise", self.face_noise),
            ("sync_noise", self.sync_noise),
        ] {
            if !nonneg(v) {
                return Err(SimError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if !self.sync_gain.is_finite() {
            return fail("sync_gain must be finite");
        }
        Ok(())
    }

    fn n_frames(&self) -> usize {
        (self.duration_s * self.fps).floor() as usize
    }
}

/// Ground truth behind one simulated person.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub clip_id: String,
    pub person_id: String,
    pub voice: Vec<f64>,
    pub face: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub bundle: Bundle,
    pub identities: Vec<Identity>,
}

const STREAM_CLIP: u64 = 0;
const STREAM_SYNC: u64 = 1;
const STREAM_WORLD: u64 = 2;

fn rng_for(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | index);
    rng
}

fn normalise(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

struct World {
    voice_map: Vec<Vec<f64>>,
    face_map: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &SimConfig) -> Self {
        let mut rng = rng_for(cfg.world_seed, STREAM_WORLD, 0);
        let mut matrix = |rows: usize| (0..rows).map(|_| gaussian_vec(&mut rng, cfg.d_latent)).collect();
        Self {
            voice_map: matrix(cfg.d_speaker),
            face_map: matrix(cfg.d_face),
        }
    }

    fn embed(map: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = map
            .iter()
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        normalise(&mut v);
        v
    }
}

fn add_noise<R: Rng>(rng: &mut R, base: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    base.iter().map(|&b| b + n.sample(rng)).collect()
}

fn geometric_frames(mean_s: f64, fps: f64) -> Geometric {
    Geometric::new(1.0 / (mean_s * fps)).expect("mean covers at least one frame")
}

/// Two-state renewal process per identity with geometric on/off durations.
/// A spurt that falls due while another identity is talking starts with
/// probability `overlap_rate`, otherwise it waits until the floor is free.
pub fn simulate_activity<R: Rng>(cfg: &SimConfig, n_ids: usize, n_frames: usize, rng: &mut R) -> Vec<Vec<bool>> {
    let on = geometric_frames(cfg.spurt_on_mean_s, cfg.fps);
    let off = geometric_frames(cfg.spurt_off_mean_s, cfg.fps);
    let mut y = vec![vec![false; n_frames]; n_ids];
    let mut active = vec![false; n_ids];
    let mut waiting = vec![false; n_ids];
    let mut left: Vec<u64> = (0..n_ids).map(|_| 1 + off.sample(rng)).collect();
    let mut order: Vec<usize> = (0..n_ids).collect();
    for f in 0..n_frames {
        for i in 0..n_ids {
            if active[i] && left[i] == 0 {
                active[i] = false;
                left[i] = 1 + off.sample(rng);
            }
        }
        order.shuffle(rng);
        for &i in &order {
            if active[i] || left[i] > 0 {
                continue;
            }
            let busy = active.iter().any(|&a| a);
            let start = !busy || (!waiting[i] && rng.random::<f64>() < cfg.overlap_rate);
            if start {
                active[i] = true;
                waiting[i] = false;
                left[i] = 1 + on.sample(rng);
            } else {
                waiting[i] = true;
            }
        }
        for i in 0..n_ids {
            y[i][f] = active[i];
            if left[i] > 0 {
                left[i] -= 1;
            }
        }
    }
    y
}

/// Maximal runs of `true` as half-open frame ranges.
pub fn active_runs(y: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (f, &a) in y.iter().enumerate() {
        match (a, start) {
            (true, None) => start = Some(f),
            (false, Some(s)) => {
                runs.push((s, f));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, y.len()));
    }
    runs
}

fn quality_trajectory<R: Rng>(cfg: &SimConfig, len: usize, rng: &mut R) -> Vec<f64> {
    let base = if cfg.quality_hi > cfg.quality_lo {
        rng.random_range(cfg.quality_lo..=cfg.quality_hi)
    } else {
        cfg.quality_lo
    };
    let eta = Normal::new(0.0, cfg.quality_sigma).expect("validated");
    let mut q = Vec::with_capacity(len);
    let mut prev = base;
    for _ in 0..len {
        let next = (cfg.quality_rho * prev + (1.0 - cfg.quality_rho) * base + eta.sample(rng)).clamp(0.0, 1.0);
        q.push(next);
        prev = next;
    }
    q
}

struct ClipOutput {
    clip: ClipMeta,
    tracks: Vec<FaceTrack>,
    labels: Vec<SpeakingLabel>,
    utterances: Vec<Utterance>,
    utt_embeddings: Vec<UtteranceEmbedding>,
    face_embeddings: Vec<FaceEmbeddingTrack>,
    identities: Vec<Identity>,
}

fn generate_clip(cfg: &SimConfig, world: &World, index: usize) -> ClipOutput {
    let mut rng = rng_for(cfg.seed, STREAM_CLIP, index as u64);
    let clip_id = format!("clip{index:03}");
    let n_frames = cfg.n_frames();
    let n_ids = rng.random_range(cfg.identities_min..=cfg.identities_max);

    let identities: Vec<Identity> = (0..n_ids)
        .map(|k| {
            let mut z = gaussian_vec(&mut rng, cfg.d_latent);
            normalise(&mut z);
            Identity {
                clip_id: clip_id.clone(),
                person_id: format!("spk{k}"),
                voice: World::embed(&world.voice_map, &z),
                face: World::embed(&world.face_map, &z),
            }
        })
        .collect();

    let y = simulate_activity(cfg, n_ids, n_frames, &mut rng);

    let mut tracks = Vec::with_capacity(n_ids);
    let mut labels = Vec::with_capacity(n_ids);
    let mut face_embeddings = Vec::with_capacity(n_ids);
    for (k, who) in identities.iter().enumerate() {
        let frac = if cfg.visible_min < 1.0 {
            rng.random_range(cfg.visible_min..=1.0)
        } else {
            1.0
        };
        let len = ((frac * n_frames as f64).ceil() as usize).clamp(1, n_frames.max(1));
        let start = rng.random_range(0..=n_frames.saturating_sub(len));
        let quality = quality_trajectory(cfg, len, &mut rng);
        let frames = quality
            .iter()
            .map(|&q| add_noise(&mut rng, &who.face, cfg.face_noise * (1.0 - q)))
            .collect();
        let track_id = format!("trk{k}");
        labels.push(SpeakingLabel {
            clip_id: clip_id.clone(),
            track_id: track_id.clone(),
            active: y[k][start..start + len].to_vec(),
        });
        tracks.push(FaceTrack {
            clip_id: clip_id.clone(),
            track_id,
            person_id: who.person_id.clone(),
            start_frame: start as u64,
            frame_count: len as u64,
            quality: Some(quality),
        });
        face_embeddings.push(FaceEmbeddingTrack {
            clip_id: clip_id.clone(),
            person_id: who.person_id.clone(),
            frames,
        });
    }

    let mut runs: Vec<(usize, usize, usize)> = (0..n_ids)
        .flat_map(|k| active_runs(&y[k]).into_iter().map(move |(a, b)| (a, b, k)))
        .collect();
    runs.sort_unstable();
    let mut utterances = Vec::with_capacity(runs.len());
    let mut utt_embeddings = Vec::with_capacity(runs.len());
    for (n, &(a, b, k)) in runs.iter().enumerate() {
        let overlapped = (a..b).filter(|&f| (0..n_ids).any(|j| j != k && y[j][f])).count();
        let overlap = overlapped as f64 / (b - a) as f64;
        let utt_id = format!("{clip_id}_u{n:03}");
        utt_embeddings.push(UtteranceEmbedding {
            utt_id: utt_id.clone(),
            vector: add_noise(
                &mut rng,
                &identities[k].voice,
                cfg.audio_noise * (1.0 + cfg.overlap_penalty * overlap),
            ),
        });
        utterances.push(Utterance {
            clip_id: clip_id.clone(),
            utt_id,
            start_s: a as f64 / cfg.fps,
            end_s: b as f64 / cfg.fps,
            speaker_hint: Some(identities[k].person_id.clone()),
        });
    }

    ClipOutput {
        clip: ClipMeta::new(&clip_id, cfg.duration_s, cfg.fps),
        tracks,
        labels,
        utterances,
        utt_embeddings,
        face_embeddings,
        identities,
    }
}

/// Generates a bundle plus the ground-truth identities. Clips are generated
/// in parallel from independent per-clip streams.
pub fn generate(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let world = World::new(cfg);
    let clips: Vec<ClipOutput> = (0..cfg.n_clips)
        .into_par_iter()
        .map(|i| generate_clip(cfg, &world, i))
        .collect();
    let mut out = SimOutput {
        bundle: Bundle::default(),
        identities: Vec::new(),
    };
    for c in clips {
        let b = &mut out.bundle;
        b.clips.push(c.clip);
        b.tracks.extend(c.tracks);
        b.labels.extend(c.labels);
        b.utterances.extend(c.utterances);
        b.utt_embeddings.extend(c.utt_embeddings);
        b.face_embeddings.extend(c.face_embeddings);
        out.identities.extend(c.identities);
    }
    Ok(out)
}

pub fn generate_bundle(cfg: &SimConfig) -> Result<Bundle, SimError> {
    Ok(generate(cfg)?.bundle)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Synthetic sync-model scores: `logistic(g * (2y - 1) * q + noise)` per
/// frame, so falling quality pulls scores towards chance.
pub fn synth_sync_scores(cfg: &SimConfig, bundle: &Bundle) -> Result<Vec<FrameScoreStream>, SimError> {
    cfg.validate()?;
    let labels = bundle.label_map();
    let clip_index: HashMap<&str, usize> = bundle
        .clips
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clip_id.as_str(), i))
        .collect();
    let noise = Normal::new(0.0, cfg.sync_noise).expect("validated");
    let per_clip: Vec<Vec<FrameScoreStream>> = bundle
        .clips
        .par_iter()
        .map(|clip| {
            let mut rng = rng_for(cfg.seed, STREAM_SYNC, clip_index[clip.clip_id.as_str()] as u64);
            let mut tracks: Vec<&FaceTrack> = bundle.tracks.iter().filter(|t| t.clip_id == clip.clip_id).collect();
            tracks.sort_by(|a, b| a.track_id.cmp(&b.track_id));
            tracks
                .into_iter()
                .map(|t| {
                    let id = format!("{}/{}", t.clip_id, t.track_id);
                    let label = labels
                        .get(&(t.clip_id.as_str(), t.track_id.as_str()))
                        .ok_or_else(|| SimError::InvalidConfig(format!("track {id} has no label")))?;
                    let quality = t
                        .quality
                        .as_ref()
                        .ok_or_else(|| SimError::InvalidConfig(format!("track {id} has no quality")))?;
                    if quality.len() != label.active.len() {
                        return Err(SimError::InvalidConfig(format!("track {id}: quality and labels differ in length")));
                    }
                    let scores = label
                        .active
                        .iter()
                        .zip(quality)
                        .map(|(&y, &q)| {
                            let sign = if y { 1.0 } else { -1.0 };
                            let eps = if cfg.sync_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            logistic(cfg.sync_gain * sign * q + eps)
                        })
                        .collect();
                    Ok(FrameScoreStream {
                        clip_id: t.clip_id.clone(),
                        track_id: t.track_id.clone(),
                        scores,
                        source: Some("sync".into()),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradeMode {
    /// Blend towards chance (0.5).
    #[default]
    Silence,
    /// Blend towards uniform random scores.
    Noise,
}

impl std::str::FromStr for DegradeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "silence" => Ok(Self::Silence),
            "noise" => Ok(Self::Noise),
            other => Err(format!("unknown degrade mode `{other}` (expected silence or noise)")),
        }
    }
}

/// A frame range of one track, in track-relative frame indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackSpan {
    pub clip_id: String,
    pub track_id: String,
    pub span: FrameSpan,
}

fn key_hash(clip_id: &str, track_id: &str) -> u64 {
    // FNV-1a, stable across builds
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in clip_id.bytes().chain([b'/']).chain(track_id.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Pulls masked frames towards uninformative scores:
/// `score <- (1 - strength) * score + strength * target` where the target is
/// 0.5 (silence) or a uniform draw (noise). Frames outside the spans are
/// untouched. Overlapping spans degrade a frame once.
pub fn degrade_sync(
    streams: &[FrameScoreStream],
    spans: &[TrackSpan],
    mode: DegradeMode,
    strength: f64,
    seed: u64,
) -> Result<Vec<FrameScoreStream>, SimError> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(SimError::InvalidConfig(format!("strength {strength} is outside [0,1]")));
    }
    let mut by_key: HashMap<(&str, &str), Vec<FrameSpan>> = HashMap::new();
    for s in spans {
        by_key.entry((&s.clip_id, &s.track_id)).or_default().push(s.span);
    }
    streams
        .iter()
        .map(|stream| {
            let mut out = stream.clone();
            let Some(track_spans) = by_key.get(&stream.key()) else {
                return Ok(out);
            };
            let len = stream.scores.len();
            let mut masked = vec![false; len];
            for sp in track_spans {
                if sp.end_frame as usize > len {
                    return Err(SimError::SpanOutOfRange {
                        id: format!("{}/{}", stream.clip_id, stream.track_id),
                        len,
                        start: sp.start_frame,
                        end: sp.end_frame,
                    });
                }
                masked[sp.start_frame as usize..sp.end_frame as usize].fill(true);
            }
            let mut rng = rng_for(seed ^ key_hash(&stream.clip_id, &stream.track_id), STREAM_SYNC, 0);
            for (score, _) in out.scores.iter_mut().zip(&masked).filter(|(_, &m)| m) {
                let target = match mode {
                    DegradeMode::Silence => 0.5,
                    DegradeMode::Noise => rng.random::<f64>(),
                };
                *score = (1.0 - strength) * *score + strength * target;
            }
            Ok(out)
        })
        .collect()
}
