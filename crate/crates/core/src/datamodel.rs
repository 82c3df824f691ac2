//! Domain types, JSONL manifests and bundle validation.
//!
//! Every manifest is UTF-8, one JSON object per line. Frame indices are
//! 0-based and every frame range is half-open.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

pub const DEFAULT_VIDEO_FPS: f64 = 30.0;
pub const DEFAULT_AUDIO_SAMPLE_RATE: f64 = 16_000.0;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{kind} `{id}`: {message}")]
    Validation {
        kind: &'static str,
        id: String,
        message: String,
    },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("sidecar: {0}")]
    Sidecar(String),
}

impl ManifestError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Whether unknown keys in a record are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

fn default_fps() -> f64 {
    DEFAULT_VIDEO_FPS
}

fn default_sample_rate() -> f64 {
    DEFAULT_AUDIO_SAMPLE_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: String,
    pub duration_s: f64,
    #[serde(default = "default_fps")]
    pub video_fps: f64,
    #[serde(default = "default_sample_rate")]
    pub audio_sample_rate: f64,
    pub n_audio_samples: u64,
}

impl ClipMeta {
    pub fn new(clip_id: impl Into<String>, duration_s: f64, video_fps: f64) -> Self {
        let audio_sample_rate = DEFAULT_AUDIO_SAMPLE_RATE;
        Self {
            clip_id: clip_id.into(),
            duration_s,
            video_fps,
            audio_sample_rate,
            n_audio_samples: (duration_s * audio_sample_rate).round() as u64,
        }
    }

    /// Upper bound (exclusive) on any frame index a track may occupy.
    pub fn frame_limit(&self) -> u64 {
        (self.duration_s * self.video_fps).floor() as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceTrack {
    pub clip_id: String,
    pub track_id: String,
    pub person_id: String,
    pub start_frame: u64,
    pub frame_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<Vec<f64>>,
}

impl FaceTrack {
    pub fn end_frame(&self) -> u64 {
        self.start_frame + self.frame_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakingLabel {
    pub clip_id: String,
    pub track_id: String,
    #[serde(serialize_with = "ser_bits", deserialize_with = "de_bits")]
    pub active: Vec<bool>,
}

fn ser_bits<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(bits.iter().map(|&b| u8::from(b)))
}

fn de_bits<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Bit {
        Int(u64),
        Bool(bool),
    }
    let raw = Vec::<Bit>::deserialize(d)?;
    raw.into_iter()
        .map(|b| match b {
            Bit::Int(0) | Bit::Bool(false) => Ok(false),
            Bit::Int(1) | Bit::Bool(true) => Ok(true),
            Bit::Int(v) => Err(serde::de::Error::custom(format!(
                "activity flag must be 0 or 1, got {v}"
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub clip_id: String,
    pub utt_id: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEmbedding {
    pub utt_id: String,
    pub vector: Vec<f64>,
}

/// Per-frame face embeddings of one identity in one clip, `T x d_F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceEmbeddingTrack {
    pub clip_id: String,
    pub person_id: String,
    pub frames: Vec<Vec<f64>>,
}

impl FaceEmbeddingTrack {
    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }
}

/// Per-frame speaking probabilities aligned with one face track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreStream {
    pub clip_id: String,
    pub track_id: String,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl FrameScoreStream {
    pub fn zeros(clip_id: &str, track_id: &str, len: usize) -> Self {
        Self {
            clip_id: clip_id.to_owned(),
            track_id: track_id.to_owned(),
            scores: vec![0.0; len],
            source: None,
        }
    }

    pub fn with_source(mut self, source: &str) -> Self {
        self.source = Some(source.to_owned());
        self
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.clip_id, &self.track_id)
    }
}

/// A manifest line type: knows its schema keys and its standalone invariants.
pub trait Record: Serialize + DeserializeOwned {
    const KIND: &'static str;
    const KEYS: &'static [&'static str];

    fn id(&self) -> String;

    /// Invariants checkable without other manifests.
    fn check(&self) -> Result<(), String>;
}

fn check_unit_interval(values: &[f64], what: &str) -> Result<(), String> {
    match values
        .iter()
        .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
    {
        Some(i) => Err(format!("{what}[{i}] = {} is outside [0,1]", values[i])),
        None => Ok(()),
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<(), String> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(format!("{what}[{i}] is not finite")),
        None => Ok(()),
    }
}

impl Record for ClipMeta {
    const KIND: &'static str = "clip";
    const KEYS: &'static [&'static str] = &[
        "clip_id",
        "duration_s",
        "video_fps",
        "audio_sample_rate",
        "n_audio_samples",
    ];

    fn id(&self) -> String {
        self.clip_id.clone()
    }

    fn check(&self) -> Result<(), String> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(format!("duration_s must be > 0, got {}", self.duration_s));
        }
        if !(self.video_fps.is_finite() && self.video_fps > 0.0) {
            return Err(format!("video_fps must be > 0, got {}", self.video_fps));
        }
        if !(self.audio_sample_rate.is_finite() && self.audio_sample_rate > 0.0) {
            return Err(format!(
                "audio_sample_rate must be > 0, got {}",
                self.audio_sample_rate
            ));
        }
        let expected = (self.duration_s * self.audio_sample_rate).round();
        if (self.n_audio_samples as f64 - expected).abs() > 1.0 {
            return Err(format!(
                "n_audio_samples {} disagrees with duration x rate = {expected}",
                self.n_audio_samples
            ));
        }
        Ok(())
    }
}

impl Record for FaceTrack {
    const KIND: &'static str = "track";
    const KEYS: &'static [&'static str] = &[
        "clip_id",
        "track_id",
        "person_id",
        "start_frame",
        "frame_count",
        "quality",
    ];

    fn id(&self) -> String {
        format!("{}/{}", self.clip_id, self.track_id)
    }

    fn check(&self) -> Result<(), String> {
        if self.frame_count == 0 {
            return Err("frame_count must be >= 1".into());
        }
        if let Some(q) = &self.quality {
            if q.len() as u64 != self.frame_count {
                return Err(format!(
                    "quality has {} values but frame_count is {}",
                    q.len(),
                    self.frame_count
                ));
            }
            check_unit_interval(q, "quality")?;
        }
        Ok(())
    }
}

impl Record for SpeakingLabel {
    const KIND: &'static str = "label";
    const KEYS: &'static [&'static str] = &["clip_id", "track_id", "active"];

    fn id(&self) -> String {
        format!("{}/{}", self.clip_id, self.track_id)
    }

    fn check(&self) -> Result<(), String> {
        if self.active.is_empty() {
            return Err("active sequence is empty".into());
        }
        Ok(())
    }
}

impl Record for Utterance {
    const KIND: &'static str = "utterance";
    const KEYS: &'static [&'static str] = &["clip_id", "utt_id", "start_s", "end_s", "speaker_hint"];

    fn id(&self) -> String {
        self.utt_id.clone()
    }

    fn check(&self) -> Result<(), String> {
        if !(self.start_s.is_finite() && self.end_s.is_finite()) {
            return Err("non-finite bounds".into());
        }
        if !(0.0 <= self.start_s && self.start_s < self.end_s) {
            return Err(format!(
                "need 0 <= start_s < end_s, got [{}, {})",
                self.start_s, self.end_s
            ));
        }
        Ok(())
    }
}

impl Record for UtteranceEmbedding {
    const KIND: &'static str = "utterance embedding";
    const KEYS: &'static [&'static str] = &["utt_id", "vector"];

    fn id(&self) -> String {
        self.utt_id.clone()
    }

    fn check(&self) -> Result<(), String> {
        if self.vector.is_empty() {
            return Err("empty vector".into());
        }
        check_finite(&self.vector, "vector")
    }
}

impl Record for FaceEmbeddingTrack {
    const KIND: &'static str = "face embedding";
    const KEYS: &'static [&'static str] = &["clip_id", "person_id", "frames"];

    fn id(&self) -> String {
        format!("{}/{}", self.clip_id, self.person_id)
    }

    fn check(&self) -> Result<(), String> {
        let dim = self.dim();
        if self.frames.is_empty() || dim == 0 {
            return Err("needs at least one non-empty frame".into());
        }
        for (t, row) in self.frames.iter().enumerate() {
            if row.len() != dim {
                return Err(format!("frame {t} has {} values, expected {dim}", row.len()));
            }
            check_finite(row, &format!("frames[{t}]"))?;
        }
        Ok(())
    }
}

impl Record for FrameScoreStream {
    const KIND: &'static str = "score stream";
    const KEYS: &'static [&'static str] = &["clip_id", "track_id", "scores", "source"];

    fn id(&self) -> String {
        format!("{}/{}", self.clip_id, self.track_id)
    }

    fn check(&self) -> Result<(), String> {
        if self.scores.is_empty() {
            return Err("empty score sequence".into());
        }
        check_unit_interval(&self.scores, "scores")
    }
}

/// Parses and validates line-delimited records. Blank lines are skipped.
pub fn read_manifest<T: Record, R: BufRead>(
    reader: R,
    mode: ParseMode,
) -> Result<Vec<T>, ManifestError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| ManifestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let Value::Object(map) = &value else {
            return Err(ManifestError::Parse {
                line: line_no,
                message: "record must be a JSON object".into(),
            });
        };
        if mode == ParseMode::Strict {
            if let Some(key) = map.keys().find(|k| !T::KEYS.contains(&k.as_str())) {
                return Err(ManifestError::Parse {
                    line: line_no,
                    message: format!("unknown key `{key}` in {} record", T::KIND),
                });
            }
        }
        let record: T = serde_json::from_value(value).map_err(|e| ManifestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record.check().map_err(|message| ManifestError::Validation {
            kind: T::KIND,
            id: record.id(),
            message,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_manifest<T: Record>(path: &Path, mode: ParseMode) -> Result<Vec<T>, ManifestError> {
    let file = File::open(path).map_err(|e| ManifestError::io(path, e))?;
    read_manifest(BufReader::new(file), mode)
}

/// Canonical form: compact JSON, schema key order, one record per line.
pub fn write_records<T: Serialize, W: Write>(mut w: W, records: &[T]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_manifest<T: Serialize>(path: &Path, records: &[T]) -> Result<(), ManifestError> {
    let file = File::create(path).map_err(|e| ManifestError::io(path, e))?;
    write_records(BufWriter::new(file), records).map_err(|e| ManifestError::io(path, e))
}

pub const CLIPS_FILE: &str = "clips.jsonl";
pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const UTTERANCES_FILE: &str = "utterances.jsonl";
pub const UTT_EMB_FILE: &str = "utt_emb.jsonl";
pub const FACE_EMB_FILE: &str = "face_emb.jsonl";
pub const UTT_EMB_SIDECAR: &str = "utt_emb.bin";
pub const FACE_EMB_SIDECAR: &str = "face_emb.bin";

/// Every manifest of a dataset, as loaded from one directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub clips: Vec<ClipMeta>,
    pub tracks: Vec<FaceTrack>,
    pub labels: Vec<SpeakingLabel>,
    pub utterances: Vec<Utterance>,
    pub utt_embeddings: Vec<UtteranceEmbedding>,
    pub face_embeddings: Vec<FaceEmbeddingTrack>,
}

impl Bundle {
    /// Loads a bundle directory. Missing label or embedding manifests load as
    /// empty; embeddings fall back to binary sidecars when the JSONL is absent.
    pub fn load_dir(dir: &Path, mode: ParseMode) -> Result<Self, ManifestError> {
        let optional = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let clips = load_manifest(&dir.join(CLIPS_FILE), mode)?;
        let tracks = load_manifest(&dir.join(TRACKS_FILE), mode)?;
        let labels = match optional(LABELS_FILE) {
            Some(p) => load_manifest(&p, mode)?,
            None => Vec::new(),
        };
        let utterances = match optional(UTTERANCES_FILE) {
            Some(p) => load_manifest(&p, mode)?,
            None => Vec::new(),
        };
        let utt_embeddings = match (optional(UTT_EMB_FILE), optional(UTT_EMB_SIDECAR)) {
            (Some(p), _) => load_manifest(&p, mode)?,
            (None, Some(p)) => read_utterance_sidecar(&p)?,
            (None, None) => Vec::new(),
        };
        let face_embeddings = match (optional(FACE_EMB_FILE), optional(FACE_EMB_SIDECAR)) {
            (Some(p), _) => load_manifest(&p, mode)?,
            (None, Some(p)) => read_face_sidecar(&p)?,
            (None, None) => Vec::new(),
        };
        Ok(Self {
            clips,
            tracks,
            labels,
            utterances,
            utt_embeddings,
            face_embeddings,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), ManifestError> {
        std::fs::create_dir_all(dir).map_err(|e| ManifestError::io(dir, e))?;
        write_manifest(&dir.join(CLIPS_FILE), &self.clips)?;
        write_manifest(&dir.join(TRACKS_FILE), &self.tracks)?;
        write_manifest(&dir.join(LABELS_FILE), &self.labels)?;
        write_manifest(&dir.join(UTTERANCES_FILE), &self.utterances)?;
        write_manifest(&dir.join(UTT_EMB_FILE), &self.utt_embeddings)?;
        write_manifest(&dir.join(FACE_EMB_FILE), &self.face_embeddings)?;
        Ok(())
    }

    pub fn clip(&self, clip_id: &str) -> Option<&ClipMeta> {
        self.clips.iter().find(|c| c.clip_id == clip_id)
    }

    pub fn label_map(&self) -> HashMap<(&str, &str), &SpeakingLabel> {
        self.labels
            .iter()
            .map(|l| ((l.clip_id.as_str(), l.track_id.as_str()), l))
            .collect()
    }

    pub fn track_map(&self) -> HashMap<(&str, &str), &FaceTrack> {
        self.tracks
            .iter()
            .map(|t| ((t.clip_id.as_str(), t.track_id.as_str()), t))
            .collect()
    }

    pub fn utt_embedding_map(&self) -> HashMap<&str, &UtteranceEmbedding> {
        self.utt_embeddings
            .iter()
            .map(|e| (e.utt_id.as_str(), e))
            .collect()
    }

    /// Face embeddings of a clip, ordered by person id.
    pub fn faces_in_clip(&self, clip_id: &str) -> Vec<&FaceEmbeddingTrack> {
        let mut v: Vec<_> = self
            .face_embeddings
            .iter()
            .filter(|f| f.clip_id == clip_id)
            .collect();
        v.sort_by(|a, b| a.person_id.cmp(&b.person_id));
        v
    }

    pub fn utterances_in_clip(&self, clip_id: &str) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.clip_id == clip_id)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum FindingKind {
    DuplicateId,
    DanglingReference,
    LengthMismatch,
    OutOfRange,
    DimensionMismatch,
    MissingLabel,
    MissingEmbedding,
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::DuplicateId => "DuplicateId",
            Self::DanglingReference => "DanglingReference",
            Self::LengthMismatch => "LengthMismatch",
            Self::OutOfRange => "OutOfRange",
            Self::DimensionMismatch => "DimensionMismatch",
            Self::MissingLabel => "MissingLabel",
            Self::MissingEmbedding => "MissingEmbedding",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.kind, self.subject, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn of_kind(&self, kind: FindingKind) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(move |f| f.kind == kind)
    }

    fn push(&mut self, kind: FindingKind, subject: impl Into<String>, message: impl Into<String>) {
        self.findings.push(Finding {
            kind,
            subject: subject.into(),
            message: message.into(),
        });
    }
}

fn duplicates<'a>(ids: impl Iterator<Item = String> + 'a) -> BTreeSet<String> {
    let mut seen = HashSet::new();
    let mut dup = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.clone()) {
            dup.insert(id);
        }
    }
    dup
}

/// Cross-checks all manifests of a bundle. An empty report means the bundle
/// can be scored and evaluated.
pub fn validate_bundle(bundle: &Bundle) -> ValidationReport {
    use FindingKind::*;
    let mut report = ValidationReport::default();

    let dup_sets = [
        (CLIPS_FILE, duplicates(bundle.clips.iter().map(Record::id))),
        (TRACKS_FILE, duplicates(bundle.tracks.iter().map(Record::id))),
        (LABELS_FILE, duplicates(bundle.labels.iter().map(Record::id))),
        (UTTERANCES_FILE, duplicates(bundle.utterances.iter().map(Record::id))),
        (UTT_EMB_FILE, duplicates(bundle.utt_embeddings.iter().map(Record::id))),
        (FACE_EMB_FILE, duplicates(bundle.face_embeddings.iter().map(Record::id))),
    ];
    for (file, ids) in dup_sets {
        for id in ids {
            report.push(DuplicateId, id, format!("appears more than once in {file}"));
        }
    }

    let clips: HashMap<&str, &ClipMeta> =
        bundle.clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    let tracks = bundle.track_map();

    for t in &bundle.tracks {
        match clips.get(t.clip_id.as_str()) {
            None => report.push(DanglingReference, t.id(), format!("unknown clip `{}`", t.clip_id)),
            Some(c) if t.end_frame() > c.frame_limit() => report.push(
                OutOfRange,
                t.id(),
                format!("frames [{}, {}) exceed clip limit {}", t.start_frame, t.end_frame(), c.frame_limit()),
            ),
            Some(_) => {}
        }
    }

    let labelled: HashSet<(&str, &str)> = bundle
        .labels
        .iter()
        .map(|l| (l.clip_id.as_str(), l.track_id.as_str()))
        .collect();
    for l in &bundle.labels {
        match tracks.get(&(l.clip_id.as_str(), l.track_id.as_str())) {
            None => report.push(DanglingReference, l.id(), "label references unknown track"),
            Some(t) if t.frame_count != l.active.len() as u64 => report.push(
                LengthMismatch,
                l.id(),
                format!("{} labels for {} frames", l.active.len(), t.frame_count),
            ),
            Some(_) => {}
        }
    }
    for t in &bundle.tracks {
        if !labelled.contains(&(t.clip_id.as_str(), t.track_id.as_str())) {
            report.push(MissingLabel, t.id(), "track has no speaking label");
        }
    }

    for u in &bundle.utterances {
        match clips.get(u.clip_id.as_str()) {
            None => report.push(DanglingReference, u.id(), format!("unknown clip `{}`", u.clip_id)),
            Some(c) if u.end_s > c.duration_s => report.push(
                OutOfRange,
                u.id(),
                format!("end_s {} exceeds clip duration {}", u.end_s, c.duration_s),
            ),
            Some(_) => {}
        }
    }

    let utt_ids: HashSet<&str> = bundle.utterances.iter().map(|u| u.utt_id.as_str()).collect();
    let emb_ids: HashSet<&str> = bundle
        .utt_embeddings
        .iter()
        .map(|e| e.utt_id.as_str())
        .collect();
    for e in &bundle.utt_embeddings {
        if !utt_ids.contains(e.utt_id.as_str()) {
            report.push(DanglingReference, e.id(), "embedding for unknown utterance");
        }
    }
    for u in &bundle.utterances {
        if !emb_ids.contains(u.utt_id.as_str()) {
            report.push(MissingEmbedding, u.id(), "utterance has no speaker embedding");
        }
    }
    let speaker_dims: BTreeMap<usize, usize> =
        bundle.utt_embeddings.iter().fold(BTreeMap::new(), |mut m, e| {
            *m.entry(e.vector.len()).or_default() += 1;
            m
        });
    if speaker_dims.len() > 1 {
        report.push(
            DimensionMismatch,
            UTT_EMB_FILE,
            format!("speaker embedding dimensions differ: {speaker_dims:?}"),
        );
    }

    for f in &bundle.face_embeddings {
        if !clips.contains_key(f.clip_id.as_str()) {
            report.push(DanglingReference, f.id(), format!("unknown clip `{}`", f.clip_id));
        }
    }
    let face_dims: BTreeMap<usize, usize> =
        bundle.face_embeddings.iter().fold(BTreeMap::new(), |mut m, f| {
            *m.entry(f.dim()).or_default() += 1;
            m
        });
    if face_dims.len() > 1 {
        report.push(
            DimensionMismatch,
            FACE_EMB_FILE,
            format!("face embedding dimensions differ: {face_dims:?}"),
        );
    }

    report.findings.sort();
    report
}

/// Checks score streams against a bundle's tracks and labels: every stream
/// must name a known track, match its frame count, and appear once.
pub fn validate_streams(bundle: &Bundle, streams: &[FrameScoreStream]) -> ValidationReport {
    use FindingKind::*;
    let mut report = ValidationReport::default();
    for id in duplicates(streams.iter().map(Record::id)) {
        report.push(DuplicateId, id, "score stream appears more than once");
    }
    let tracks = bundle.track_map();
    let labels = bundle.label_map();
    for s in streams {
        let key = (s.clip_id.as_str(), s.track_id.as_str());
        match tracks.get(&key) {
            None => report.push(DanglingReference, s.id(), "scores for unknown track"),
            Some(t) if t.frame_count != s.scores.len() as u64 => report.push(
                LengthMismatch,
                s.id(),
                format!("{} scores for {} frames", s.scores.len(), t.frame_count),
            ),
            Some(_) => {}
        }
        match labels.get(&key) {
            Some(l) if l.active.len() != s.scores.len() => report.push(
                LengthMismatch,
                s.id(),
                format!("{} scores for {} labels", s.scores.len(), l.active.len()),
            ),
            Some(_) => {}
            None => report.push(MissingLabel, s.id(), "scored track has no speaking label"),
        }
    }
    report.findings.sort();
    report.findings.dedup();
    report
}

const SIDECAR_MAGIC: &[u8; 4] = b"ASDE";
const SIDECAR_VERSION: u16 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_matrix<'a>(out: &mut Vec<u8>, rows: usize, cols: usize, values: impl Iterator<Item = &'a f64>) {
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct SidecarReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl SidecarReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ManifestError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ManifestError::Sidecar("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ManifestError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ManifestError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| ManifestError::Sidecar(format!("invalid utf-8 key: {e}")))
    }

    fn matrix(&mut self) -> Result<Vec<Vec<f64>>, ManifestError> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let bytes = self.take(rows * cols * 4)?;
        let flat: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(flat.chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
    }
}

fn sidecar_header(kind: u8, count: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out
}

fn open_sidecar(path: &Path, kind: u8) -> Result<(Vec<u8>, usize), ManifestError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| ManifestError::io(path, e))?;
    if buf.len() < 11 || &buf[..4] != SIDECAR_MAGIC {
        return Err(ManifestError::Sidecar("bad magic".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != SIDECAR_VERSION {
        return Err(ManifestError::Sidecar(format!("unsupported version {version}")));
    }
    if buf[6] != kind {
        return Err(ManifestError::Sidecar(format!("expected record kind {kind}, found {}", buf[6])));
    }
    let count = u32::from_le_bytes(buf[7..11].try_into().unwrap()) as usize;
    Ok((buf, count))
}

/// Binary sidecar for bulk speaker embeddings: little-endian f32 values with
/// length-prefixed keys and dimensions. Values are narrowed to 32 bits.
pub fn write_utterance_sidecar(path: &Path, embs: &[UtteranceEmbedding]) -> Result<(), ManifestError> {
    let mut out = sidecar_header(0, embs.len());
    for e in embs {
        put_str(&mut out, &e.utt_id);
        put_matrix(&mut out, 1, e.vector.len(), e.vector.iter());
    }
    std::fs::write(path, out).map_err(|e| ManifestError::io(path, e))
}

pub fn read_utterance_sidecar(path: &Path) -> Result<Vec<UtteranceEmbedding>, ManifestError> {
    let (buf, count) = open_sidecar(path, 0)?;
    let mut r = SidecarReader { buf: &buf, pos: 11 };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let utt_id = r.string()?;
        let mut rows = r.matrix()?;
        if rows.len() != 1 {
            return Err(ManifestError::Sidecar(format!("{utt_id}: expected one row")));
        }
        let e = UtteranceEmbedding {
            utt_id,
            vector: rows.pop().unwrap(),
        };
        e.check().map_err(|message| ManifestError::Validation {
            kind: UtteranceEmbedding::KIND,
            id: e.id(),
            message,
        })?;
        out.push(e);
    }
    Ok(out)
}

pub fn write_face_sidecar(path: &Path, faces: &[FaceEmbeddingTrack]) -> Result<(), ManifestError> {
    let mut out = sidecar_header(1, faces.len());
    for f in faces {
        put_str(&mut out, &f.clip_id);
        put_str(&mut out, &f.person_id);
        put_matrix(&mut out, f.frames.len(), f.dim(), f.frames.iter().flatten());
    }
    std::fs::write(path, out).map_err(|e| ManifestError::io(path, e))
}

pub fn read_face_sidecar(path: &Path) -> Result<Vec<FaceEmbeddingTrack>, ManifestError> {
    let (buf, count) = open_sidecar(path, 1)?;
    let mut r = SidecarReader { buf: &buf, pos: 11 };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let clip_id = r.string()?;
        let person_id = r.string()?;
        let frames = r.matrix()?;
        let f = FaceEmbeddingTrack {
            clip_id,
            person_id,
            frames,
        };
        f.check().map_err(|message| ManifestError::Validation {
            kind: FaceEmbeddingTrack::KIND,
            id: f.id(),
            message,
        })?;
        out.push(f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse<T: Record>(text: &str) -> Result<Vec<T>, ManifestError> {
        read_manifest(text.as_bytes(), ParseMode::Strict)
    }

    #[test]
    fn empty_file_is_empty_collection() {
        assert!(parse::<FaceTrack>("").unwrap().is_empty());
        assert!(parse::<ClipMeta>("\n\n").unwrap().is_empty());
    }

    #[test]
    fn short_quality_names_the_track() {
        let q: Vec<String> = (0..9).map(|_| "0.5".into()).collect();
        let line = format!(
            r#"{{"clip_id":"c","track_id":"t7","person_id":"p","start_frame":0,"frame_count":10,"quality":[{}]}}"#,
            q.join(",")
        );
        match parse::<FaceTrack>(&line) {
            Err(ManifestError::Validation { id, message, .. }) => {
                assert_eq!(id, "c/t7");
                assert!(message.contains("9 values"), "{message}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"utt_id\":\"a\",\"vector\":[1.0]}\n{not json\n";
        match parse::<UtteranceEmbedding>(text) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected_unless_lenient() {
        let line = r#"{"utt_id":"a","vector":[1.0],"extra":3}"#;
        assert!(matches!(
            parse::<UtteranceEmbedding>(line),
            Err(ManifestError::Parse { .. })
        ));
        let ok: Vec<UtteranceEmbedding> =
            read_manifest(line.as_bytes(), ParseMode::Lenient).unwrap();
        assert_eq!(ok[0].vector, vec![1.0]);
    }

    #[test]
    fn clip_sample_count_checked() {
        let ok = r#"{"clip_id":"c","duration_s":2.0,"video_fps":30,"audio_sample_rate":16000,"n_audio_samples":32001}"#;
        assert!(parse::<ClipMeta>(ok).is_ok());
        let bad = r#"{"clip_id":"c","duration_s":2.0,"video_fps":30,"audio_sample_rate":16000,"n_audio_samples":32002}"#;
        assert!(matches!(parse::<ClipMeta>(bad), Err(ManifestError::Validation { .. })));
        let defaults = r#"{"clip_id":"c","duration_s":1.0,"n_audio_samples":16000}"#;
        let c = parse::<ClipMeta>(defaults).unwrap();
        assert_eq!(c[0].video_fps, 30.0);
    }

    #[test]
    fn labels_accept_bits_and_reject_other_ints() {
        let l = parse::<SpeakingLabel>(r#"{"clip_id":"c","track_id":"t","active":[0,1,1]}"#).unwrap();
        assert_eq!(l[0].active, vec![false, true, true]);
        let mut out = Vec::new();
        write_records(&mut out, &l).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"clip_id\":\"c\",\"track_id\":\"t\",\"active\":[0,1,1]}\n"
        );
        assert!(parse::<SpeakingLabel>(r#"{"clip_id":"c","track_id":"t","active":[2]}"#).is_err());
    }

    #[test]
    fn scores_outside_unit_interval_rejected() {
        let r = parse::<FrameScoreStream>(r#"{"clip_id":"c","track_id":"t","scores":[0.5,1.2]}"#);
        assert!(matches!(r, Err(ManifestError::Validation { .. })));
    }

    #[test]
    fn utterance_bounds_checked() {
        let r = parse::<Utterance>(r#"{"clip_id":"c","utt_id":"u","start_s":2.0,"end_s":2.0}"#);
        assert!(r.is_err());
    }

    fn tiny_bundle() -> Bundle {
        Bundle {
            clips: vec![ClipMeta::new("c1", 5.0, 30.0)],
            tracks: vec![FaceTrack {
                clip_id: "c1".into(),
                track_id: "t1".into(),
                person_id: "p1".into(),
                start_frame: 0,
                frame_count: 4,
                quality: Some(vec![0.5; 4]),
            }],
            labels: vec![SpeakingLabel {
                clip_id: "c1".into(),
                track_id: "t1".into(),
                active: vec![true, false, false, true],
            }],
            utterances: vec![Utterance {
                clip_id: "c1".into(),
                utt_id: "u1".into(),
                start_s: 0.0,
                end_s: 1.0,
                speaker_hint: Some("p1".into()),
            }],
            utt_embeddings: vec![UtteranceEmbedding {
                utt_id: "u1".into(),
                vector: vec![0.1, 0.2],
            }],
            face_embeddings: vec![FaceEmbeddingTrack {
                clip_id: "c1".into(),
                person_id: "p1".into(),
                frames: vec![vec![1.0, 0.0, 0.5]],
            }],
        }
    }

    #[test]
    fn consistent_bundle_has_empty_report() {
        assert!(validate_bundle(&tiny_bundle()).is_empty());
    }

    #[test]
    fn label_for_missing_track_is_one_finding() {
        let mut b = tiny_bundle();
        b.labels.push(SpeakingLabel {
            clip_id: "c1".into(),
            track_id: "ghost".into(),
            active: vec![true],
        });
        let r = validate_bundle(&b);
        assert_eq!(r.findings.len(), 1, "{:?}", r.findings);
        assert_eq!(r.findings[0].kind, FindingKind::DanglingReference);
    }

    #[test]
    fn short_stream_is_length_mismatch() {
        let b = tiny_bundle();
        let ok = FrameScoreStream::zeros("c1", "t1", 4);
        assert!(validate_streams(&b, std::slice::from_ref(&ok)).is_empty());
        let r = validate_streams(&b, &[FrameScoreStream::zeros("c1", "t1", 3)]);
        assert!(r.findings.iter().all(|f| f.kind == FindingKind::LengthMismatch));
        assert_eq!(r.findings.len(), 2);
        let r = validate_streams(&b, &[ok.clone(), ok, FrameScoreStream::zeros("c1", "t9", 4)]);
        assert_eq!(r.of_kind(FindingKind::DuplicateId).count(), 1);
        assert_eq!(r.of_kind(FindingKind::DanglingReference).count(), 1);
    }

    #[test]
    fn duplicate_utterance_embedding_reported() {
        let mut b = tiny_bundle();
        b.utt_embeddings.push(b.utt_embeddings[0].clone());
        let r = validate_bundle(&b);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].kind, FindingKind::DuplicateId);
        assert_eq!(r.findings[0].subject, "u1");
    }

    #[test]
    fn label_length_and_track_range_checked() {
        let mut b = tiny_bundle();
        b.labels[0].active.pop();
        b.tracks[0].start_frame = 149;
        let r = validate_bundle(&b);
        let kinds: Vec<_> = r.findings.iter().map(|f| f.kind).collect();
        assert_eq!(kinds, vec![FindingKind::LengthMismatch, FindingKind::OutOfRange]);
    }

    #[test]
    fn sidecars_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        let up = dir.path().join(UTT_EMB_SIDECAR);
        let fp = dir.path().join(FACE_EMB_SIDECAR);
        write_utterance_sidecar(&up, &b.utt_embeddings).unwrap();
        write_face_sidecar(&fp, &b.face_embeddings).unwrap();
        let u = read_utterance_sidecar(&up).unwrap();
        assert_eq!(u[0].vector, vec![0.1f32 as f64, 0.2f32 as f64]);
        let f = read_face_sidecar(&fp).unwrap();
        assert_eq!(f, b.face_embeddings);
        assert!(read_face_sidecar(&up).is_err());
    }

    #[test]
    fn bundle_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        b.write_dir(dir.path()).unwrap();
        let back = Bundle::load_dir(dir.path(), ParseMode::Strict).unwrap();
        assert_eq!(back, b);
    }
}
