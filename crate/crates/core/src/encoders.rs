//! Frozen feature extractors.
//!
//! Stand-ins for large pretrained audio/text/vision backbones: deterministic,
//! seeded, and immutable after construction. They share the backbones' shape
//! contracts (an audio clip becomes `m x d_a` tokens, a caption becomes
//! `l x d_t` tokens and a unit-norm `d_v` vector) while being cheap enough to
//! run in tests. Training never updates them; only the adapters and poolers
//! downstream learn.
//!
//! Determinism matters more than fidelity here: the same input and seeds must
//! produce bit-identical output on every run, because archives, checkpoints
//! and evaluation reports are all hashed in tests.
//!
//! # Derivation scheme
//!
//! * audio: log-mel features ([`crate::mel`]), grouped 4 consecutive frames
//!   per token, each group flattened and passed through a fixed projection
//!   matrix drawn from the stream `"audio-projection"` with N(0, 1/g) entries
//!   (g = flattened group length);
//! * text: per-token embeddings drawn from the stream `"text-token:<token>"`
//!   as uniform [-1, 1) values, plus sinusoidal position terms;
//! * vision-text: per-token embeddings from `"vision-token:<token>"`, mean
//!   pooled, rotated by a fixed orthogonal matrix from `"vision-orthogonal"`
//!   (Gram-Schmidt over a Gaussian draw), then L2-normalized.

use crate::audio::{resample, AudioClip, ClassId};
use crate::error::{Error, Result};
use crate::mel::{MelConfig, MelFrontend};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Consecutive mel frames folded into one audio token.
pub const FRAMES_PER_TOKEN: usize = 4;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_a: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub audio_seed: u64,
    pub text_seed: u64,
    pub vision_seed: u64,
    pub mel: MelConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_a: 48,
            d_t: 32,
            d_v: 32,
            audio_seed: 101,
            text_seed: 202,
            vision_seed: 303,
            mel: MelConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 || self.d_t == 0 || self.d_v == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        self.mel.validate()
    }
}

/// Audio token matrix, `m x d_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTokens {
    tokens: Tensor,
}

impl AudioTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::Shape("audio tokens must be rank 2".into()));
        }
        Ok(AudioTokens { tokens })
    }

    pub fn count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }
}

/// A caption with both target embeddings attached.
#[derive(Debug, Clone)]
pub struct CaptionRecord {
    pub class_id: ClassId,
    pub text: String,
    /// `l x d_t`, one row per caption token.
    pub text_embedding: Tensor,
    /// `d_v`, unit norm.
    pub vision_embedding: Tensor,
}

impl CaptionRecord {
    pub fn token_count(&self) -> usize {
        self.text_embedding.rows()
    }
}

/// Lowercased alphanumeric runs; punctuation and whitespace separate tokens.
pub fn tokenize(caption: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in caption.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// The three frozen encoders plus their precomputed fixed weights.
pub struct Encoders {
    config: EncoderConfig,
    mel: MelFrontend,
    /// `(FRAMES_PER_TOKEN * mel_bins) x d_a`, row-major.
    audio_projection: Vec<f64>,
    /// `d_v x d_v` orthogonal, row-major.
    vision_rotation: Vec<f64>,
}

impl Encoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mel = MelFrontend::new(config.mel.clone())?;
        let group = FRAMES_PER_TOKEN * config.mel.mel_bins;
        let mut rng = Rng::derive(config.audio_seed, "audio-projection");
        let scale = 1.0 / (group as f64).sqrt();
        let audio_projection: Vec<f64> =
            (0..group * config.d_a).map(|_| rng.normal() * scale).collect();
        let vision_rotation = orthogonal_matrix(config.d_v, config.vision_seed);
        Ok(Encoders { config, mel, audio_projection, vision_rotation })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Expected token count for a clip of `len` samples at the native rate.
    pub fn audio_token_count(&self, len: usize) -> Result<usize> {
        let frames = self.config.mel.frame_count(len)?;
        let m = frames / FRAMES_PER_TOKEN;
        if m == 0 {
            return Err(Error::Input(format!(
                "clip yields {frames} mel frames, fewer than the {FRAMES_PER_TOKEN} needed for one token"
            )));
        }
        Ok(m)
    }

    /// Audio clip -> `m x d_a` tokens. Clips at other sample rates are
    /// resampled to the configured rate first.
    pub fn encode_audio(&self, clip: &AudioClip) -> Result<AudioTokens> {
        let native = self.config.mel.sample_rate;
        let resampled;
        let samples: &[f64] = if clip.sample_rate == native {
            &clip.samples
        } else {
            resampled = resample(&clip.samples, clip.sample_rate, native);
            &resampled
        };
        let m = self.audio_token_count(samples.len())?;
        let (mel, _frames) = self.mel.log_mel(samples)?;
        let mb = self.config.mel.mel_bins;
        let group = FRAMES_PER_TOKEN * mb;
        let d_a = self.config.d_a;
        let mut out = vec![0.0; m * d_a];
        for t in 0..m {
            let flat = &mel[t * group..(t + 1) * group];
            let row = &mut out[t * d_a..(t + 1) * d_a];
            for (g, &x) in flat.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let prow = &self.audio_projection[g * d_a..(g + 1) * d_a];
                for (o, &w) in row.iter_mut().zip(prow) {
                    *o += x * w;
                }
            }
        }
        AudioTokens::new(Tensor::from_vec(vec![m, d_a], out)?)
    }

    /// Deterministic per-token embedding before position terms are added.
    pub fn text_token_embedding(&self, token: &str) -> Vec<f64> {
        hashed_embedding(self.config.text_seed, "text-token", token, self.config.d_t)
    }

    pub fn vision_token_embedding(&self, token: &str) -> Vec<f64> {
        hashed_embedding(self.config.vision_seed, "vision-token", token, self.config.d_v)
    }

    /// Caption -> `l x d_t` token embeddings with sinusoidal position terms.
    pub fn encode_text(&self, caption: &str) -> Result<Tensor> {
        let tokens = tokenize(caption);
        if tokens.is_empty() {
            return Err(Error::Input(format!("caption {caption:?} has no tokens")));
        }
        let d = self.config.d_t;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (pos, token) in tokens.iter().enumerate() {
            let mut row = self.text_token_embedding(token);
            add_position_terms(&mut row, pos);
            data.extend_from_slice(&row);
        }
        Tensor::from_vec(vec![tokens.len(), d], data)
    }

    /// Caption -> unit-norm `d_v` vector. Token order does not matter: the
    /// per-token embeddings are mean pooled before the fixed rotation.
    pub fn encode_vision_text(&self, caption: &str) -> Result<Tensor> {
        let tokens = tokenize(caption);
        if tokens.is_empty() {
            return Err(Error::Input(format!("caption {caption:?} has no tokens")));
        }
        let d = self.config.d_v;
        let mut mean = vec![0.0; d];
        for token in &tokens {
            for (m, e) in mean.iter_mut().zip(self.vision_token_embedding(token)) {
                *m += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for m in mean.iter_mut() {
            *m *= inv;
        }
        // fixed rotation, then normalize
        let mut rotated = vec![0.0; d];
        for r in 0..d {
            let mut acc = 0.0;
            for c in 0..d {
                acc += self.vision_rotation[r * d + c] * mean[c];
            }
            rotated[r] = acc;
        }
        let norm = rotated.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(format!(
                "caption {caption:?} produced a zero vision embedding"
            )));
        }
        for x in rotated.iter_mut() {
            *x /= norm;
        }
        Tensor::from_vec(vec![d], rotated)
    }

    /// Convenience: both caption targets at once.
    pub fn caption_record(&self, class_id: ClassId, text: &str) -> Result<CaptionRecord> {
        Ok(CaptionRecord {
            class_id,
            text: text.to_string(),
            text_embedding: self.encode_text(text)?,
            vision_embedding: self.encode_vision_text(text)?,
        })
    }
}

fn hashed_embedding(seed: u64, namespace: &str, token: &str, width: usize) -> Vec<f64> {
    let mut rng = Rng::derive(seed, &format!("{namespace}:{token}"));
    (0..width).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Standard transformer sinusoidal position encoding, added in place.
fn add_position_terms(row: &mut [f64], pos: usize) {
    let d = row.len();
    let pos = pos as f64;
    let mut i = 0;
    while i < d {
        let angle = pos / 10_000f64.powf(i as f64 / d as f64);
        row[i] += angle.sin();
        if i + 1 < d {
            row[i + 1] += angle.cos();
        }
        i += 2;
    }
}

/// Orthogonal matrix via modified Gram-Schmidt over a seeded Gaussian draw.
/// Row-major `d x d`; orthonormal columns.
fn orthogonal_matrix(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::derive(seed, "vision-orthogonal");
    let g: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
    let mut q = vec![0.0; d * d];
    for j in 0..d {
        let mut v: Vec<f64> = (0..d).map(|r| g[r * d + j]).collect();
        // two orthogonalization passes for numerical headroom
        for _ in 0..2 {
            for i in 0..j {
                let mut dot = 0.0;
                for r in 0..d {
                    dot += q[r * d + i] * v[r];
                }
                for r in 0..d {
                    v[r] -= dot * q[r * d + i];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-9, "degenerate Gaussian draw in orthogonalization");
        for r in 0..d {
            q[r * d + j] = v[r] / norm;
        }
    }
    q
}
