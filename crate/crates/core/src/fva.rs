//! Face-voice association scoring head.
//!
//! Speaker and face embeddings are projected to a shared width `d`. Each
//! visible identity's frame sequence passes through one pre-norm transformer
//! encoder layer (multi-head self-attention, feed-forward, residuals) and is
//! mean-pooled into a single quality-aware embedding. Utterances are then
//! scored against identities with scaled dot-product cross-attention, giving
//! a probability distribution over the identities visible in the clip.
//!
//! Frames carry no positional encoding. Each identity's frames are put in a
//! canonical (lexicographic) order before encoding, so the aggregate is
//! bit-for-bit independent of input frame order, and every identity is
//! encoded independently of the others.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::Match;
use crate::datamodel::{Bundle, FaceEmbeddingTrack};

#[derive(Debug, Error)]
pub enum FvaError {
    #[error("DimensionMismatch: {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid head configuration: {0}")]
    InvalidConfig(String),
    #[error("MissingLabel: utterance `{0}` has no speaker_hint")]
    MissingLabel(String),
    #[error("NoVisibleIdentity: {0}")]
    NoVisibleIdentity(String),
    #[error("utterance `{0}` has no speaker embedding")]
    MissingEmbedding(String),
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    #[error("params file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d_speaker: usize,
    pub d_face: usize,
    pub d_model: usize,
    /// Self-attention heads of the encoder layer.
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ff_mult: usize,
    /// Cap on encoded frames per identity; longer sequences are strided
    /// over their canonical order. `None` encodes every frame.
    pub max_frames: Option<usize>,
    pub layer_norm_eps: f64,
}

impl HeadConfig {
    pub fn new(d_speaker: usize, d_face: usize) -> Self {
        Self {
            d_speaker,
            d_face,
            d_model: 64,
            heads: 4,
            ff_mult: 4,
            max_frames: None,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), FvaError> {
        let bad = |m: String| Err(FvaError::InvalidConfig(m));
        if self.d_speaker == 0 || self.d_face == 0 || self.d_model == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be positive".into());
        }
        if self.max_frames == Some(0) {
            return bad("max_frames must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    fn d_ff(&self) -> usize {
        self.d_model * self.ff_mult
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Parameter tensors, in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tensor {
    AudioW,
    AudioB,
    FaceW,
    FaceB,
    Ln1Gain,
    Ln1Bias,
    AttnQW,
    AttnQB,
    AttnKW,
    AttnVW,
    AttnVB,
    AttnOW,
    AttnOB,
    Ln2Gain,
    Ln2Bias,
    FfInW,
    FfInB,
    FfOutW,
    XattnQW,
    XattnKW,
}

/// Trainability groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorGroup {
    /// Stand-ins for the frozen pretrained modality branches.
    Projection,
    Encoder,
    FeedForward,
    CrossAttention,
}

impl Tensor {
    pub const ALL: [Tensor; 20] = [
        Tensor::AudioW,
        Tensor::AudioB,
        Tensor::FaceW,
        Tensor::FaceB,
        Tensor::Ln1Gain,
        Tensor::Ln1Bias,
        Tensor::AttnQW,
        Tensor::AttnQB,
        Tensor::AttnKW,
        Tensor::AttnVW,
        Tensor::AttnVB,
        Tensor::AttnOW,
        Tensor::AttnOB,
        Tensor::Ln2Gain,
        Tensor::Ln2Bias,
        Tensor::FfInW,
        Tensor::FfInB,
        Tensor::FfOutW,
        Tensor::XattnQW,
        Tensor::XattnKW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::AudioW => "audio_proj.weight",
            Tensor::AudioB => "audio_proj.bias",
            Tensor::FaceW => "face_proj.weight",
            Tensor::FaceB => "face_proj.bias",
            Tensor::Ln1Gain => "encoder.ln1.gain",
            Tensor::Ln1Bias => "encoder.ln1.bias",
            Tensor::AttnQW => "encoder.attn.q.weight",
            Tensor::AttnQB => "encoder.attn.q.bias",
            Tensor::AttnKW => "encoder.attn.k.weight",
            Tensor::AttnVW => "encoder.attn.v.weight",
            Tensor::AttnVB => "encoder.attn.v.bias",
            Tensor::AttnOW => "encoder.attn.out.weight",
            Tensor::AttnOB => "encoder.attn.out.bias",
            Tensor::Ln2Gain => "encoder.ln2.gain",
            Tensor::Ln2Bias => "encoder.ln2.bias",
            Tensor::FfInW => "encoder.ff.in.weight",
            Tensor::FfInB => "encoder.ff.in.bias",
            Tensor::FfOutW => "encoder.ff.out.weight",
            Tensor::XattnQW => "xattn.q.weight",
            Tensor::XattnKW => "xattn.k.weight",
        }
    }

    pub fn group(self) -> TensorGroup {
        match self {
            Tensor::AudioW | Tensor::AudioB | Tensor::FaceW | Tensor::FaceB => TensorGroup::Projection,
            Tensor::FfInW | Tensor::FfInB | Tensor::FfOutW => TensorGroup::FeedForward,
            Tensor::XattnQW | Tensor::XattnKW => TensorGroup::CrossAttention,
            _ => TensorGroup::Encoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub audio_w: Array2<f64>,
    pub audio_b: Array1<f64>,
    pub face_w: Array2<f64>,
    pub face_b: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub attn_q_w: Array2<f64>,
    pub attn_q_b: Array1<f64>,
    pub attn_k_w: Array2<f64>,
    pub attn_v_w: Array2<f64>,
    pub attn_v_b: Array1<f64>,
    pub attn_o_w: Array2<f64>,
    pub attn_o_b: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub ff_in_w: Array2<f64>,
    pub ff_in_b: Array1<f64>,
    pub ff_out_w: Array2<f64>,
    pub xattn_q_w: Array2<f64>,
    pub xattn_k_w: Array2<f64>,
}

impl HeadParams {
    /// All weights zero, layer-norm gains zero too. Used for gradient buffers.
    pub fn zeros(config: HeadConfig) -> Self {
        let (ds, df, d, dff) = (config.d_speaker, config.d_face, config.d_model, config.d_ff());
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        Self {
            config,
            audio_w: m(ds, d),
            audio_b: v(d),
            face_w: m(df, d),
            face_b: v(d),
            ln1_gain: v(d),
            ln1_bias: v(d),
            attn_q_w: m(d, d),
            attn_q_b: v(d),
            attn_k_w: m(d, d),
            attn_v_w: m(d, d),
            attn_v_b: v(d),
            attn_o_w: m(d, d),
            attn_o_b: v(d),
            ln2_gain: v(d),
            ln2_bias: v(d),
            ff_in_w: m(d, dff),
            ff_in_b: v(dff),
            ff_out_w: m(dff, d),
            xattn_q_w: m(d, d),
            xattn_k_w: m(d, d),
        }
    }

    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self, FvaError> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in Tensor::ALL {
            let shape = p.shape(t);
            match (t, shape) {
                (Tensor::Ln1Gain | Tensor::Ln2Gain, _) => p.tensor_mut(t).fill(1.0),
                (_, (rows, Some(cols))) => {
                    let limit = (6.0 / (rows + cols) as f64).sqrt();
                    for w in p.tensor_mut(t) {
                        *w = rng.random_range(-limit..limit);
                    }
                }
                _ => {}
            }
        }
        Ok(p)
    }

    /// `(rows, Some(cols))` for matrices, `(len, None)` for vectors.
    pub fn shape(&self, t: Tensor) -> (usize, Option<usize>) {
        let m = |a: &Array2<f64>| (a.nrows(), Some(a.ncols()));
        let v = |a: &Array1<f64>| (a.len(), None);
        match t {
            Tensor::AudioW => m(&self.audio_w),
            Tensor::AudioB => v(&self.audio_b),
            Tensor::FaceW => m(&self.face_w),
            Tensor::FaceB => v(&self.face_b),
            Tensor::Ln1Gain => v(&self.ln1_gain),
            Tensor::Ln1Bias => v(&self.ln1_bias),
            Tensor::AttnQW => m(&self.attn_q_w),
            Tensor::AttnQB => v(&self.attn_q_b),
            Tensor::AttnKW => m(&self.attn_k_w),
            Tensor::AttnVW => m(&self.attn_v_w),
            Tensor::AttnVB => v(&self.attn_v_b),
            Tensor::AttnOW => m(&self.attn_o_w),
            Tensor::AttnOB => v(&self.attn_o_b),
            Tensor::Ln2Gain => v(&self.ln2_gain),
            Tensor::Ln2Bias => v(&self.ln2_bias),
            Tensor::FfInW => m(&self.ff_in_w),
            Tensor::FfInB => v(&self.ff_in_b),
            Tensor::FfOutW => m(&self.ff_out_w),
            Tensor::XattnQW => m(&self.xattn_q_w),
            Tensor::XattnKW => m(&self.xattn_k_w),
        }
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        let s = match t {
            Tensor::AudioW => self.audio_w.as_slice(),
            Tensor::AudioB => self.audio_b.as_slice(),
            Tensor::FaceW => self.face_w.as_slice(),
            Tensor::FaceB => self.face_b.as_slice(),
            Tensor::Ln1Gain => self.ln1_gain.as_slice(),
            Tensor::Ln1Bias => self.ln1_bias.as_slice(),
            Tensor::AttnQW => self.attn_q_w.as_slice(),
            Tensor::AttnQB => self.attn_q_b.as_slice(),
            Tensor::AttnKW => self.attn_k_w.as_slice(),
            Tensor::AttnVW => self.attn_v_w.as_slice(),
            Tensor::AttnVB => self.attn_v_b.as_slice(),
            Tensor::AttnOW => self.attn_o_w.as_slice(),
            Tensor::AttnOB => self.attn_o_b.as_slice(),
            Tensor::Ln2Gain => self.ln2_gain.as_slice(),
            Tensor::Ln2Bias => self.ln2_bias.as_slice(),
            Tensor::FfInW => self.ff_in_w.as_slice(),
            Tensor::FfInB => self.ff_in_b.as_slice(),
            Tensor::FfOutW => self.ff_out_w.as_slice(),
            Tensor::XattnQW => self.xattn_q_w.as_slice(),
            Tensor::XattnKW => self.xattn_k_w.as_slice(),
        };
        s.expect("parameter tensors are contiguous")
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let s = match t {
            Tensor::AudioW => self.audio_w.as_slice_mut(),
            Tensor::AudioB => self.audio_b.as_slice_mut(),
            Tensor::FaceW => self.face_w.as_slice_mut(),
            Tensor::FaceB => self.face_b.as_slice_mut(),
            Tensor::Ln1Gain => self.ln1_gain.as_slice_mut(),
            Tensor::Ln1Bias => self.ln1_bias.as_slice_mut(),
            Tensor::AttnQW => self.attn_q_w.as_slice_mut(),
            Tensor::AttnQB => self.attn_q_b.as_slice_mut(),
            Tensor::AttnKW => self.attn_k_w.as_slice_mut(),
            Tensor::AttnVW => self.attn_v_w.as_slice_mut(),
            Tensor::AttnVB => self.attn_v_b.as_slice_mut(),
            Tensor::AttnOW => self.attn_o_w.as_slice_mut(),
            Tensor::AttnOB => self.attn_o_b.as_slice_mut(),
            Tensor::Ln2Gain => self.ln2_gain.as_slice_mut(),
            Tensor::Ln2Bias => self.ln2_bias.as_slice_mut(),
            Tensor::FfInW => self.ff_in_w.as_slice_mut(),
            Tensor::FfInB => self.ff_in_b.as_slice_mut(),
            Tensor::FfOutW => self.ff_out_w.as_slice_mut(),
            Tensor::XattnQW => self.xattn_q_w.as_slice_mut(),
            Tensor::XattnKW => self.xattn_k_w.as_slice_mut(),
        };
        s.expect("parameter tensors are contiguous")
    }

    pub fn n_params(&self) -> usize {
        Tensor::ALL.iter().map(|&t| self.tensor(t).len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        Tensor::ALL
            .iter()
            .all(|&t| self.tensor(t).iter().all(|v| v.is_finite()))
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"FVAH";
const PARAMS_VERSION: u16 = 1;

/// Writes `FVAH`, a u16 version, the dimension header and every tensor as
/// little-endian f64 in [`Tensor::ALL`] order.
pub fn write_params<W: Write>(mut w: W, p: &HeadParams) -> Result<(), FvaError> {
    let c = &p.config;
    let mut out = Vec::with_capacity(64 + 8 * p.n_params());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    for dim in [
        c.d_speaker,
        c.d_face,
        c.d_model,
        c.heads,
        c.ff_mult,
        c.max_frames.unwrap_or(0),
    ] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.layer_norm_eps.to_le_bytes());
    out.extend_from_slice(&(p.n_params() as u64).to_le_bytes());
    for t in Tensor::ALL {
        for v in p.tensor(t) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<HeadParams, FvaError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let fmt = |m: &str| FvaError::Format(m.to_owned());
    if buf.len() < 46 || &buf[..4] != PARAMS_MAGIC {
        return Err(fmt("missing FVAH magic"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != PARAMS_VERSION {
        return Err(FvaError::Format(format!("unsupported version {version}")));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let max_frames = u32_at(26);
    let config = HeadConfig {
        d_speaker: u32_at(6),
        d_face: u32_at(10),
        d_model: u32_at(14),
        heads: u32_at(18),
        ff_mult: u32_at(22),
        max_frames: (max_frames > 0).then_some(max_frames),
        layer_norm_eps: f64::from_le_bytes(buf[30..38].try_into().unwrap()),
    };
    config.validate()?;
    let count = u64::from_le_bytes(buf[38..46].try_into().unwrap()) as usize;
    let mut p = HeadParams::zeros(config);
    if count != p.n_params() || buf.len() != 46 + 8 * count {
        return Err(fmt("parameter count does not match header dimensions"));
    }
    let mut values = buf[46..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in Tensor::ALL {
        for slot in p.tensor_mut(t) {
            *slot = values.next().unwrap();
        }
    }
    if !p.is_finite() {
        return Err(fmt("non-finite parameter"));
    }
    Ok(p)
}

pub fn save_params(path: &Path, p: &HeadParams) -> Result<(), FvaError> {
    write_params(File::create(path)?, p)
}

pub fn load_params(path: &Path) -> Result<HeadParams, FvaError> {
    read_params(File::open(path)?)
}

/// One identity's frames after canonical ordering and optional striding.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedFrames(Array2<f64>);

impl PreparedFrames {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

pub fn prepare_frames(config: &HeadConfig, frames: &[Vec<f64>]) -> Result<PreparedFrames, FvaError> {
    if frames.is_empty() {
        return Err(FvaError::EmptyBatch("identity has no frames".into()));
    }
    if let Some(bad) = frames.iter().find(|f| f.len() != config.d_face) {
        return Err(FvaError::DimensionMismatch {
            what: "face embedding".into(),
            expected: config.d_face,
            got: bad.len(),
        });
    }
    let mut order: Vec<&Vec<f64>> = frames.iter().collect();
    order.sort_by(|a, b| lexicographic(a, b));
    let picked: Vec<&Vec<f64>> = match config.max_frames {
        Some(cap) if order.len() > cap => (0..cap).map(|i| order[i * order.len() / cap]).collect(),
        _ => order,
    };
    let mut m = Array2::zeros((picked.len(), config.d_face));
    for (mut row, src) in m.rows_mut().into_iter().zip(picked) {
        row.assign(&ArrayView1::from(src.as_slice()));
    }
    Ok(PreparedFrames(m))
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>, eps: f64) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + eps).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx`; accumulates gain and bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xhat), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.iter().zip(xhat).map(|(g, x)| g * x).sum::<f64>() / d;
        for (g, x) in row.iter_mut().zip(xhat) {
            *g = is * (*g - mean_g - x * mean_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Softmax whose normaliser is summed in sorted order, so permuting the
/// inputs permutes the outputs exactly.
pub fn softmax_symmetric(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let denom: f64 = sorted.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

fn add_row(m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m + b
}

struct EncoderCache {
    input: Array2<f64>,
    ln1: LnCache,
    normed1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    normed2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

/// Encodes one identity and mean-pools it into a `d` vector.
fn encode_identity(p: &HeadParams, frames: ArrayView2<f64>) -> (Array1<f64>, EncoderCache) {
    let cfg = &p.config;
    let eps = cfg.layer_norm_eps;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let projected = add_row(frames.dot(&p.face_w), &p.face_b);
    let (normed1, ln1) = layer_norm(&projected, &p.ln1_gain, &p.ln1_bias, eps);
    let q = add_row(normed1.dot(&p.attn_q_w), &p.attn_q_b);
    // no key bias: it shifts each softmax row by a constant
    let k = normed1.dot(&p.attn_k_w);
    let v = add_row(normed1.dot(&p.attn_v_w), &p.attn_v_b);

    let t = frames.nrows();
    let mut attn = Array2::zeros((t, cfg.d_model));
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut w = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows_inplace(&mut w);
        attn.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
        weights.push(w);
    }
    let hidden = &projected + &add_row(attn.dot(&p.attn_o_w), &p.attn_o_b);
    let (normed2, ln2) = layer_norm(&hidden, &p.ln2_gain, &p.ln2_bias, eps);
    let ff_pre = add_row(normed2.dot(&p.ff_in_w), &p.ff_in_b);
    let ff_act = ff_pre.mapv(gelu);
    // no output bias: it would shift every identity equally
    let out = hidden + ff_act.dot(&p.ff_out_w);
    let pooled = out.sum_axis(Axis(0)) / t as f64;

    let cache = EncoderCache {
        input: frames.to_owned(),
        ln1,
        normed1,
        q,
        k,
        v,
        weights,
        attn,
        ln2,
        normed2,
        ff_pre,
        ff_act,
    };
    (pooled, cache)
}

fn encode_identity_backward(p: &HeadParams, c: &EncoderCache, d_pooled: ArrayView1<f64>, g: &mut HeadParams) {
    let cfg = &p.config;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t = c.input.nrows();

    let d_out = Array2::from_shape_fn((t, cfg.d_model), |(_, j)| d_pooled[j] / t as f64);

    // feed-forward branch
    g.ff_out_w += &c.ff_act.t().dot(&d_out);
    let mut d_pre = d_out.dot(&p.ff_out_w.t());
    d_pre.zip_mut_with(&c.ff_pre, |dg, &z| *dg *= gelu_grad(z));
    g.ff_in_w += &c.normed2.t().dot(&d_pre);
    g.ff_in_b += &d_pre.sum_axis(Axis(0));
    let d_normed2 = d_pre.dot(&p.ff_in_w.t());
    let d_hidden = d_out + layer_norm_backward(&d_normed2, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

    // attention branch
    g.attn_o_w += &c.attn.t().dot(&d_hidden);
    g.attn_o_b += &d_hidden.sum_axis(Axis(0));
    let d_attn = d_hidden.dot(&p.attn_o_w.t());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, w) in c.weights.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_head = d_attn.slice(cols);
        let dw = d_head.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&w.t().dot(&d_head));
        let mut ds = dw;
        for (mut ds_row, w_row) in ds.rows_mut().into_iter().zip(w.rows()) {
            let dot: f64 = ds_row.iter().zip(w_row).map(|(a, b)| a * b).sum();
            for (x, &wv) in ds_row.iter_mut().zip(w_row) {
                *x = wv * (*x - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let n1t = c.normed1.t();
    g.attn_q_w += &n1t.dot(&dq);
    g.attn_q_b += &dq.sum_axis(Axis(0));
    g.attn_k_w += &n1t.dot(&dk);
    g.attn_v_w += &n1t.dot(&dv);
    g.attn_v_b += &dv.sum_axis(Axis(0));
    let d_normed1 = dq.dot(&p.attn_q_w.t()) + dk.dot(&p.attn_k_w.t()) + dv.dot(&p.attn_v_w.t());
    let d_projected =
        d_hidden + layer_norm_backward(&d_normed1, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);

    g.face_w += &c.input.t().dot(&d_projected);
    g.face_b += &d_projected.sum_axis(Axis(0));
}

/// One clip's audio and video inputs.
#[derive(Debug, Clone)]
pub struct MatchBatch {
    pub clip_id: String,
    /// `N_u x d_S` speaker embeddings.
    pub audio: Array2<f64>,
    pub identities: Vec<String>,
    pub video: Vec<PreparedFrames>,
}

impl MatchBatch {
    pub fn new(
        config: &HeadConfig,
        clip_id: &str,
        audio: &[&[f64]],
        faces: &[&FaceEmbeddingTrack],
    ) -> Result<Self, FvaError> {
        if audio.is_empty() {
            return Err(FvaError::EmptyBatch(format!("clip `{clip_id}` has no utterances in batch")));
        }
        if faces.is_empty() {
            return Err(FvaError::NoVisibleIdentity(format!("clip `{clip_id}` has no face embeddings")));
        }
        let mut a = Array2::zeros((audio.len(), config.d_speaker));
        for (mut row, src) in a.rows_mut().into_iter().zip(audio) {
            if src.len() != config.d_speaker {
                return Err(FvaError::DimensionMismatch {
                    what: "speaker embedding".into(),
                    expected: config.d_speaker,
                    got: src.len(),
                });
            }
            row.assign(&ArrayView1::from(*src));
        }
        let video = faces
            .iter()
            .map(|f| prepare_frames(config, &f.frames))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            clip_id: clip_id.to_owned(),
            audio: a,
            identities: faces.iter().map(|f| f.person_id.clone()).collect(),
            video,
        })
    }

    fn with_audio(&self, audio: Array2<f64>) -> Self {
        Self {
            clip_id: self.clip_id.clone(),
            audio,
            identities: self.identities.clone(),
            video: self.video.clone(),
        }
    }
}

/// Quality-aware aggregate of each identity: `|S_c| x d`.
pub fn aggregate_faces(p: &HeadParams, video: &[PreparedFrames]) -> Result<Array2<f64>, FvaError> {
    let d = p.config.d_model;
    let mut out = Array2::zeros((video.len(), d));
    for (mut row, frames) in out.rows_mut().into_iter().zip(video) {
        if frames.0.ncols() != p.config.d_face {
            return Err(FvaError::DimensionMismatch {
                what: "face embedding".into(),
                expected: p.config.d_face,
                got: frames.0.ncols(),
            });
        }
        row.assign(&encode_identity(p, frames.view()).0);
    }
    Ok(out)
}

struct Forward {
    audio_proj: Array2<f64>,
    queries: Array2<f64>,
    pooled: Array2<f64>,
    keys: Array2<f64>,
    probs: Array2<f64>,
    caches: Vec<EncoderCache>,
}

fn forward(p: &HeadParams, batch: &MatchBatch) -> Result<Forward, FvaError> {
    let cfg = &p.config;
    if batch.audio.ncols() != cfg.d_speaker {
        return Err(FvaError::DimensionMismatch {
            what: "speaker embedding".into(),
            expected: cfg.d_speaker,
            got: batch.audio.ncols(),
        });
    }
    if batch.video.is_empty() {
        return Err(FvaError::NoVisibleIdentity(batch.clip_id.clone()));
    }
    let d = cfg.d_model;
    let n_ids = batch.video.len();
    let mut pooled = Array2::zeros((n_ids, d));
    let mut keys = Array2::zeros((n_ids, d));
    let mut caches = Vec::with_capacity(n_ids);
    for (s, frames) in batch.video.iter().enumerate() {
        if frames.0.ncols() != cfg.d_face {
            return Err(FvaError::DimensionMismatch {
                what: "face embedding".into(),
                expected: cfg.d_face,
                got: frames.0.ncols(),
            });
        }
        let (x, cache) = encode_identity(p, frames.view());
        keys.row_mut(s).assign(&x.dot(&p.xattn_k_w));
        pooled.row_mut(s).assign(&x);
        caches.push(cache);
    }

    let n_u = batch.audio.nrows();
    let mut audio_proj = Array2::zeros((n_u, d));
    let mut queries = Array2::zeros((n_u, d));
    let mut probs = Array2::zeros((n_u, n_ids));
    let temperature = 1.0 / (d as f64).sqrt();
    for n in 0..n_u {
        let u = batch.audio.row(n).dot(&p.audio_w) + &p.audio_b;
        let q = u.dot(&p.xattn_q_w);
        let logits: Vec<f64> = keys.rows().into_iter().map(|k| q.dot(&k) * temperature).collect();
        probs.row_mut(n).assign(&Array1::from(softmax_symmetric(&logits)));
        audio_proj.row_mut(n).assign(&u);
        queries.row_mut(n).assign(&q);
    }
    Ok(Forward {
        audio_proj,
        queries,
        pooled,
        keys,
        probs,
        caches,
    })
}

/// `N_u x |S_c|` matching probabilities; each row is a distribution over
/// the clip's visible identities.
pub fn match_probs(p: &HeadParams, batch: &MatchBatch) -> Result<Array2<f64>, FvaError> {
    Ok(forward(p, batch)?.probs)
}

fn check_targets(batch: &MatchBatch, targets: &[usize]) -> Result<(), FvaError> {
    if targets.len() != batch.audio.nrows() {
        return Err(FvaError::DimensionMismatch {
            what: "targets".into(),
            expected: batch.audio.nrows(),
            got: targets.len(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= batch.video.len()) {
        return Err(FvaError::NoVisibleIdentity(format!(
            "target index {t} but only {} identities in clip `{}`",
            batch.video.len(),
            batch.clip_id
        )));
    }
    Ok(())
}

fn cross_entropy(probs: &Array2<f64>, targets: &[usize]) -> f64 {
    let n = targets.len() as f64;
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs[[i, t]].ln())
        .sum::<f64>()
        / n
}

/// Mean cross-entropy of the rows of `match_probs` against `targets`.
pub fn batch_loss(p: &HeadParams, batch: &MatchBatch, targets: &[usize]) -> Result<f64, FvaError> {
    check_targets(batch, targets)?;
    Ok(cross_entropy(&forward(p, batch)?.probs, targets))
}

/// Loss, analytic gradient of every tensor, and the forward probabilities.
pub fn loss_and_gradients(
    p: &HeadParams,
    batch: &MatchBatch,
    targets: &[usize],
) -> Result<(f64, HeadParams, Array2<f64>), FvaError> {
    check_targets(batch, targets)?;
    let fw = forward(p, batch)?;
    let loss = cross_entropy(&fw.probs, targets);
    let n_u = targets.len() as f64;
    let temperature = 1.0 / (p.config.d_model as f64).sqrt();

    let mut d_logits = fw.probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        d_logits[[i, t]] -= 1.0;
    }
    d_logits /= n_u;

    let mut g = HeadParams::zeros(p.config);
    let dq = d_logits.dot(&fw.keys) * temperature;
    let dk = d_logits.t().dot(&fw.queries) * temperature;

    g.xattn_q_w += &fw.audio_proj.t().dot(&dq);
    let du = dq.dot(&p.xattn_q_w.t());
    g.audio_w += &batch.audio.t().dot(&du);
    g.audio_b += &du.sum_axis(Axis(0));

    g.xattn_k_w += &fw.pooled.t().dot(&dk);
    let d_pooled = dk.dot(&p.xattn_k_w.t());
    for (s, cache) in fw.caches.iter().enumerate() {
        encode_identity_backward(p, cache, d_pooled.row(s), &mut g);
    }
    Ok((loss, g, fw.probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Keep the modality projections fixed, as for pretrained branches.
    pub freeze_projections: bool,
    /// Whether the encoder feed-forward sublayer is updated.
    pub train_feed_forward: bool,
    /// Seeds the per-epoch batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-5,
            decay_factor: 0.2,
            decay_every: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            freeze_projections: false,
            train_feed_forward: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.learning_rate * self.decay_factor.powi(steps as i32)
    }

    fn trains(&self, t: Tensor) -> bool {
        match t.group() {
            TensorGroup::Projection => !self.freeze_projections,
            TensorGroup::FeedForward => self.train_feed_forward,
            TensorGroup::Encoder | TensorGroup::CrossAttention => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean cross-entropy over all training utterances.
    pub loss: f64,
    /// Fraction of utterances whose argmax identity was the target.
    pub accuracy: f64,
}

struct Adam {
    m: HeadParams,
    v: HeadParams,
    step: i32,
}

impl Adam {
    fn new(config: HeadConfig) -> Self {
        Self {
            m: HeadParams::zeros(config),
            v: HeadParams::zeros(config),
            step: 0,
        }
    }

    fn update(&mut self, p: &mut HeadParams, g: &HeadParams, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for t in Tensor::ALL {
            if !cfg.trains(t) {
                continue;
            }
            let grads = g.tensor(t);
            let m = self.m.tensor_mut(t);
            let v = self.v.tensor_mut(t);
            let w = p.tensor_mut(t);
            for i in 0..w.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// One training batch: every utterance of one identity in one clip, against
/// all identities visible in that clip.
pub struct TrainingBatch {
    pub batch: MatchBatch,
    pub targets: Vec<usize>,
}

pub fn training_batches(config: &HeadConfig, bundle: &Bundle) -> Result<Vec<TrainingBatch>, FvaError> {
    let embeddings = bundle.utt_embedding_map();
    let mut clip_ids: Vec<&str> = bundle.clips.iter().map(|c| c.clip_id.as_str()).collect();
    clip_ids.sort_unstable();
    let mut out = Vec::new();
    for clip_id in clip_ids {
        let utterances = bundle.utterances_in_clip(clip_id);
        if utterances.is_empty() {
            continue;
        }
        let faces = bundle.faces_in_clip(clip_id);
        let mut by_speaker: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
        for u in utterances {
            let hint = u
                .speaker_hint
                .as_deref()
                .ok_or_else(|| FvaError::MissingLabel(u.utt_id.clone()))?;
            let emb = embeddings
                .get(u.utt_id.as_str())
                .ok_or_else(|| FvaError::MissingEmbedding(u.utt_id.clone()))?;
            by_speaker.entry(hint).or_default().push(&emb.vector);
        }
        if faces.is_empty() {
            return Err(FvaError::NoVisibleIdentity(format!("clip `{clip_id}` has no face embeddings")));
        }
        let template = MatchBatch::new(config, clip_id, &[&vec![0.0; config.d_speaker]], &faces)?;
        for (speaker, rows) in by_speaker {
            let target = template
                .identities
                .iter()
                .position(|id| id == speaker)
                .ok_or_else(|| {
                    FvaError::NoVisibleIdentity(format!("speaker `{speaker}` is not visible in clip `{clip_id}`"))
                })?;
            let mut audio = Array2::zeros((rows.len(), config.d_speaker));
            for (mut row, src) in audio.rows_mut().into_iter().zip(&rows) {
                if src.len() != config.d_speaker {
                    return Err(FvaError::DimensionMismatch {
                        what: "speaker embedding".into(),
                        expected: config.d_speaker,
                        got: src.len(),
                    });
                }
                row.assign(&ArrayView1::from(*src));
            }
            out.push(TrainingBatch {
                targets: vec![target; rows.len()],
                batch: template.with_audio(audio),
            });
        }
    }
    Ok(out)
}

/// Adam training with step decay of the learning rate. Returns the trained
/// parameters and per-epoch statistics (measured during the epoch).
pub fn train_head(
    params: &HeadParams,
    bundle: &Bundle,
    cfg: &TrainConfig,
) -> Result<(HeadParams, Vec<EpochStats>), FvaError> {
    let mut p = params.clone();
    if cfg.epochs == 0 {
        return Ok((p, Vec::new()));
    }
    let batches = training_batches(&p.config, bundle)?;
    if batches.is_empty() {
        return Err(FvaError::EmptyBatch("bundle has no labelled utterances".into()));
    }
    let total: usize = batches.iter().map(|b| b.targets.len()).sum();
    let mut adam = Adam::new(p.config);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for &bi in &order {
            let b = &batches[bi];
            let (loss, grads, probs) = loss_and_gradients(&p, &b.batch, &b.targets)?;
            loss_sum += loss * b.targets.len() as f64;
            correct += b
                .targets
                .iter()
                .enumerate()
                .filter(|&(i, &t)| argmax(probs.row(i)) == t)
                .count();
            adam.update(&mut p, &grads, lr, cfg);
        }
        trace.push(EpochStats {
            epoch,
            learning_rate: lr,
            loss: loss_sum / total as f64,
            accuracy: correct as f64 / total as f64,
        });
    }
    Ok((p, trace))
}

pub fn argmax(row: ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Scores every utterance of a clip against every visible identity; one
/// utterance per query, as at inference time.
pub fn score_clip(p: &HeadParams, bundle: &Bundle, clip_id: &str) -> Result<Vec<Match>, FvaError> {
    let mut utterances = bundle.utterances_in_clip(clip_id);
    if utterances.is_empty() {
        return Ok(Vec::new());
    }
    utterances.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let embeddings = bundle.utt_embedding_map();
    let audio: Vec<&[f64]> = utterances
        .iter()
        .map(|u| {
            embeddings
                .get(u.utt_id.as_str())
                .map(|e| e.vector.as_slice())
                .ok_or_else(|| FvaError::MissingEmbedding(u.utt_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let faces = bundle.faces_in_clip(clip_id);
    let batch = MatchBatch::new(&p.config, clip_id, &audio, &faces)?;
    let probs = match_probs(p, &batch)?;
    let mut out = Vec::with_capacity(utterances.len() * faces.len());
    for (u, row) in utterances.iter().zip(probs.rows()) {
        for (person, &prob) in batch.identities.iter().zip(row) {
            out.push(Match {
                clip_id: clip_id.to_owned(),
                utt_id: u.utt_id.clone(),
                person_id: person.clone(),
                probability: prob,
            });
        }
    }
    Ok(out)
}

/// [`score_clip`] over every clip, in clip order; clips run in parallel.
pub fn score_bundle(p: &HeadParams, bundle: &Bundle) -> Result<Vec<Match>, FvaError> {
    let per_clip = bundle
        .clips
        .par_iter()
        .map(|c| score_clip(p, bundle, &c.clip_id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

/// Per-tensor agreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub tensor: Tensor,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the whole tensor.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

pub fn gradient_check(
    p: &HeadParams,
    batch: &MatchBatch,
    targets: &[usize],
    step: f64,
) -> Result<Vec<GradientCheck>, FvaError> {
    let (_, analytic, _) = loss_and_gradients(p, batch, targets)?;
    let mut probe = p.clone();
    let mut out = Vec::with_capacity(Tensor::ALL.len());
    for t in Tensor::ALL {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in 0..probe.tensor(t).len() {
            let orig = probe.tensor(t)[i];
            probe.tensor_mut(t)[i] = orig + step;
            let up = batch_loss(&probe, batch, targets)?;
            probe.tensor_mut(t)[i] = orig - step;
            let down = batch_loss(&probe, batch, targets)?;
            probe.tensor_mut(t)[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.tensor(t)[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        out.push(GradientCheck {
            tensor: t,
            relative_error: if scale == 0.0 { 0.0 } else { diff.sqrt() / scale },
            analytic_norm: na.sqrt(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> HeadConfig {
        HeadConfig {
            d_speaker: 5,
            d_face: 6,
            d_model: 8,
            heads: 4,
            ff_mult: 4,
            max_frames: None,
            layer_norm_eps: 1e-5,
        }
    }

    fn random_frames(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn face(person: &str, frames: Vec<Vec<f64>>) -> FaceEmbeddingTrack {
        FaceEmbeddingTrack {
            clip_id: "c".into(),
            person_id: person.into(),
            frames,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(FvaError::InvalidConfig(_))));
        assert!(HeadParams::init(c, 0).is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn two_identity_scalar_example() {
        // d = 2, temperature 1/sqrt(2): logits (1/sqrt 2, 0)
        let p = softmax_symmetric(&[1.0 / 2f64.sqrt(), 0.0]);
        assert!((p[0] - 0.669_761).abs() < 1e-6, "{p:?}");
        assert!((p[1] - 0.330_239).abs() < 1e-6);
    }

    #[test]
    fn singleton_identity_gets_probability_one() {
        let cfg = small_config();
        let p = HeadParams::init(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = face("a", random_frames(&mut rng, 4, 6));
        let audio = random_frames(&mut rng, 2, 5);
        let refs: Vec<&[f64]> = audio.iter().map(Vec::as_slice).collect();
        let b = MatchBatch::new(&cfg, "c", &refs, &[&f]).unwrap();
        let probs = match_probs(&p, &b).unwrap();
        assert!(probs.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_frame_aggregate_is_the_encoded_frame() {
        let cfg = small_config();
        let p = HeadParams::init(cfg, 5).unwrap();
        let frame = vec![vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.7]];
        let prepared = prepare_frames(&cfg, &frame).unwrap();
        let agg = aggregate_faces(&p, &[prepared.clone()]).unwrap();
        // attention over a singleton returns its own value row
        let x = prepared.view().dot(&p.face_w) + &p.face_b;
        let (n1, _) = layer_norm(&x, &p.ln1_gain, &p.ln1_bias, cfg.layer_norm_eps);
        let v = n1.dot(&p.attn_v_w) + &p.attn_v_b;
        let h = &x + &(v.dot(&p.attn_o_w) + &p.attn_o_b);
        let (n2, _) = layer_norm(&h, &p.ln2_gain, &p.ln2_bias, cfg.layer_norm_eps);
        let out = &h + &((n2.dot(&p.ff_in_w) + &p.ff_in_b).mapv(gelu).dot(&p.ff_out_w));
        for (a, b) in agg.row(0).iter().zip(out.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_frames_leave_aggregate_unchanged() {
        let cfg = small_config();
        let p = HeadParams::init(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = random_frames(&mut rng, 7, 6);
        let doubled: Vec<Vec<f64>> = frames.iter().flat_map(|f| [f.clone(), f.clone()]).collect();
        let a = aggregate_faces(&p, &[prepare_frames(&cfg, &frames).unwrap()]).unwrap();
        let b = aggregate_faces(&p, &[prepare_frames(&cfg, &doubled).unwrap()]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn max_frames_strides_canonical_order() {
        let mut cfg = small_config();
        cfg.max_frames = Some(3);
        let frames: Vec<Vec<f64>> = (0..6).rev().map(|i| vec![i as f64; 6]).collect();
        let p = prepare_frames(&cfg, &frames).unwrap();
        let firsts: Vec<f64> = p.view().column(0).to_vec();
        assert_eq!(firsts, vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn dimension_mismatch_reported() {
        let cfg = small_config();
        let f = face("a", vec![vec![0.0; 5]]);
        assert!(matches!(
            MatchBatch::new(&cfg, "c", &[&[0.0; 5]], &[&f]),
            Err(FvaError::DimensionMismatch { .. })
        ));
        let f = face("a", vec![vec![0.0; 6]]);
        assert!(matches!(
            MatchBatch::new(&cfg, "c", &[&[0.0; 4]], &[&f]),
            Err(FvaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn params_file_round_trip() {
        let mut cfg = small_config();
        cfg.max_frames = Some(17);
        let p = HeadParams::init(cfg, 11).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"FVAH");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        let back = read_params(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_params(buf.as_slice()), Err(FvaError::Format(_))));
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 1e-5);
        assert_eq!(cfg.learning_rate_at(4), 1e-5);
        assert!((cfg.learning_rate_at(5) - 2e-6).abs() < 1e-20);
        assert!((cfg.learning_rate_at(12) - 4e-7).abs() < 1e-20);
    }

    #[test]
    fn frozen_projections_do_not_move() {
        let cfg = small_config();
        let p0 = HeadParams::init(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let faces = [face("a", random_frames(&mut rng, 3, 6)), face("b", random_frames(&mut rng, 2, 6))];
        let audio = random_frames(&mut rng, 2, 5);
        let refs: Vec<&[f64]> = audio.iter().map(Vec::as_slice).collect();
        let b = MatchBatch::new(&cfg, "c", &refs, &[&faces[0], &faces[1]]).unwrap();
        let (_, g, _) = loss_and_gradients(&p0, &b, &[0, 1]).unwrap();
        let tc = TrainConfig {
            freeze_projections: true,
            train_feed_forward: false,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut p = p0.clone();
        Adam::new(cfg).update(&mut p, &g, 1e-2, &tc);
        for t in Tensor::ALL {
            let moved = p.tensor(t) != p0.tensor(t);
            let expect = !matches!(t.group(), TensorGroup::Projection | TensorGroup::FeedForward)
                && g.tensor(t).iter().any(|&v| v != 0.0);
            assert_eq!(moved, expect, "{}", t.name());
        }
    }
}
