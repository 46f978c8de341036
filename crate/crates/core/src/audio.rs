//! Audio clips and their on-disk representations.
//!
//! Two interchange formats are supported:
//!
//! * WAV, PCM 16-bit little-endian, mono or stereo (stereo is downmixed by
//!   averaging the channels);
//! * a raw float32 clip format (magic `SSAU`) used for synthetic corpora,
//!   which avoids the 16-bit quantization round trip.
//!
//! Samples are `f64` in [-1, 1] in memory regardless of source format.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ioutil::{self, ByteReader};

/// Class label. Dense ids in `0..class_count`.
pub type ClassId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: ClassId,
    /// Stable identifier used as the key in embedding archives and reports.
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, label: ClassId, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Input("clip has no samples".into()));
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() || !(-1.0..=1.0).contains(&s) {
                return Err(Error::Input(format!(
                    "sample {i} is {s}, outside [-1, 1]"
                )));
            }
        }
        Ok(AudioClip { samples, sample_rate, label, source_id: source_id.into() })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Linear-interpolation resampler. Good enough for the rates involved here;
/// deterministic and dependency-free.
pub fn resample(samples: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    if from_rate == to_rate || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as u64 * to_rate as u64) / from_rate as u64).max(1) as usize;
    let ratio = from_rate as f64 / to_rate as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let a = samples[i0.min(samples.len() - 1)];
            let b = samples[(i0 + 1).min(samples.len() - 1)];
            a * (1.0 - frac) + b * frac
        })
        .collect()
}

// ---- raw float32 clips ("SSAU") ------------------------------------------

const RAW_MAGIC: &[u8; 4] = b"SSAU";
const RAW_VERSION: u32 = 1;

/// Serialize samples as float32. Values are clamped to [-1, 1] on read, so a
/// round trip through f32 is lossy only in the low bits.
pub fn write_raw_clip(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + samples.len() * 4);
    buf.extend_from_slice(RAW_MAGIC);
    ioutil::put_u32(&mut buf, RAW_VERSION);
    ioutil::put_u32(&mut buf, sample_rate);
    ioutil::put_u64(&mut buf, samples.len() as u64);
    for &s in samples {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    ioutil::write_atomic(path, &buf)
}

pub fn read_raw_clip(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = ioutil::read_file(path)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(4, "magic")?;
    if magic != RAW_MAGIC {
        return Err(Error::format_at(0, format!(
            "bad magic {magic:?} in {}, expected SSAU",
            path.display()
        )));
    }
    let version = r.read_u32("version")?;
    if version != RAW_VERSION {
        return Err(Error::format_at(4, format!("unsupported raw clip version {version}")));
    }
    let rate = r.read_u32("sample rate")?;
    let count = r.read_u64("sample count")? as usize;
    let data = r.read_f32_vec(count, "samples")?;
    r.expect_end()?;
    Ok((data.iter().map(|&s| (s as f64).clamp(-1.0, 1.0)).collect(), rate))
}

// ---- WAV ------------------------------------------------------------------

/// Read a PCM 16-bit WAV file. Stereo input is downmixed to mono by
/// averaging; other channel counts and encodings are rejected.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = ioutil::read_file(path)?;
    let mut r = ByteReader::new(&bytes);
    if r.take(4, "RIFF tag")? != b"RIFF" {
        return Err(Error::format_at(0, "not a RIFF file"));
    }
    let _riff_size = r.read_u32("RIFF size")?;
    if r.take(4, "WAVE tag")? != b"WAVE" {
        return Err(Error::format_at(8, "RIFF file is not WAVE"));
    }

    let mut format: Option<(u16, u16, u32, u16)> = None; // (codec, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while r.remaining() >= 8 {
        let id_offset = r.offset();
        let id: [u8; 4] = r.take(4, "chunk id")?.try_into().unwrap();
        let size = r.read_u32("chunk size")? as usize;
        let body = r.take(size, "chunk body")?;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format_at(id_offset, "fmt chunk too small"));
                }
                let mut fr = ByteReader::new(body);
                let codec = fr.read_u16("codec")?;
                let channels = fr.read_u16("channels")?;
                let rate = fr.read_u32("sample rate")?;
                let _byte_rate = fr.read_u32("byte rate")?;
                let _block_align = fr.read_u16("block align")?;
                let bits = fr.read_u16("bits per sample")?;
                format = Some((codec, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // skip ancillary chunks (LIST, fact, ...)
        }
        // chunks are word-aligned
        if size % 2 == 1 && r.remaining() > 0 {
            r.take(1, "chunk padding")?;
        }
    }

    let (codec, channels, rate, bits) =
        format.ok_or_else(|| Error::format("missing fmt chunk"))?;
    let data = data.ok_or_else(|| Error::format("missing data chunk"))?;
    if codec != 1 || bits != 16 {
        return Err(Error::format(format!(
            "unsupported WAV encoding: codec {codec}, {bits}-bit (want PCM 16-bit)"
        )));
    }
    if channels == 0 || channels > 2 {
        return Err(Error::format(format!("unsupported channel count {channels}")));
    }

    let ch = channels as usize;
    let frames = data.len() / (2 * ch);
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0;
        for c in 0..ch {
            let o = (f * ch + c) * 2;
            let v = i16::from_le_bytes([data[o], data[o + 1]]) as f64 / 32768.0;
            acc += v;
        }
        samples.push(acc / ch as f64);
    }
    Ok((samples, rate))
}

/// Write mono PCM 16-bit WAV.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut buf = Vec::with_capacity(44 + data_len);
    buf.extend_from_slice(b"RIFF");
    ioutil::put_u32(&mut buf, (36 + data_len) as u32);
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    ioutil::put_u32(&mut buf, 16);
    ioutil::put_u16(&mut buf, 1); // PCM
    ioutil::put_u16(&mut buf, 1); // mono
    ioutil::put_u32(&mut buf, sample_rate);
    ioutil::put_u32(&mut buf, sample_rate * 2);
    ioutil::put_u16(&mut buf, 2);
    ioutil::put_u16(&mut buf, 16);
    buf.extend_from_slice(b"data");
    ioutil::put_u32(&mut buf, data_len as u32);
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    ioutil::write_atomic(path, &buf)
}

/// Load a clip file by extension: `.wav` or `.ssau`.
pub fn read_clip_file(path: &Path) -> Result<(Vec<f64>, u32)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => read_wav(path),
        Some("ssau") => read_raw_clip(path),
        other => Err(Error::Input(format!(
            "unsupported clip extension {other:?} for {}",
            path.display()
        ))),
    }
}
