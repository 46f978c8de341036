//! Corpora: labeled clips plus one caption per class.
//!
//! A corpus lives on disk as a directory with a `manifest.json` and one
//! audio file per clip. The train/validation split is not stored; it is a
//! deterministic function of a seed, stratified per class so every class
//! contributes to validation.
//!
//! `generate_synthetic_corpus` builds a desk-scale stand-in for a real
//! audio-caption dataset: each class is a harmonic tone with its own
//! fundamental and amplitude-modulation rate, jittered per clip, captioned
//! from a small phrase bank.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{read_clip_file, write_raw_clip, AudioClip, ClassId};
use crate::encoders::{CaptionRecord, Encoders};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    clips: Vec<AudioClip>,
    /// Indexed by class id.
    captions: Vec<String>,
}

/// Clip indices for one 90/10 split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainValSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Corpus {
    pub fn new(clips: Vec<AudioClip>, captions: Vec<String>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Input("corpus has no clips".into()));
        }
        if captions.is_empty() {
            return Err(Error::Input("corpus has no captions".into()));
        }
        for caption in &captions {
            if caption.split_whitespace().next().is_none() {
                return Err(Error::Input("corpus contains an empty caption".into()));
            }
        }
        let mut normalized: Vec<String> = captions
            .iter()
            .map(|c| c.split_whitespace().collect::<Vec<_>>().join(" "))
            .collect();
        normalized.sort();
        normalized.dedup();
        if normalized.len() != captions.len() {
            // compose_captions refuses identical captions, so two classes
            // sharing one would poison every mixed batch
            return Err(Error::Input("class captions must be pairwise distinct".into()));
        }
        for clip in &clips {
            if clip.label as usize >= captions.len() {
                return Err(Error::Input(format!(
                    "clip {} has label {} but only {} captions exist",
                    clip.source_id,
                    clip.label,
                    captions.len()
                )));
            }
        }
        Ok(Corpus { clips, captions })
    }

    pub fn clips(&self) -> &[AudioClip] {
        &self.clips
    }

    pub fn class_count(&self) -> usize {
        self.captions.len()
    }

    pub fn caption(&self, class: ClassId) -> &str {
        &self.captions[class as usize]
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    /// Full caption records (text plus both target embeddings), one per
    /// class.
    pub fn caption_records(&self, encoders: &Encoders) -> Result<Vec<CaptionRecord>> {
        self.captions
            .iter()
            .enumerate()
            .map(|(c, text)| encoders.caption_record(c as ClassId, text))
            .collect()
    }

    /// Stratified 90/10 split: within each class, a seeded shuffle sends
    /// roughly every tenth clip to validation (at least one when the class
    /// has two or more clips, and never all of them). Index lists come back
    /// sorted; any epoch-level shuffling is the trainer's job.
    pub fn split(&self, seed: u64) -> TrainValSplit {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.captions.len()];
        for (i, clip) in self.clips.iter().enumerate() {
            by_class[clip.label as usize].push(i);
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (c, mut members) in by_class.into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let n = members.len();
            let val_count = if n < 2 {
                0
            } else {
                (((n as f64) * 0.1).round() as usize).clamp(1, n - 1)
            };
            let mut rng = Rng::derive(seed, &format!("split:{c}"));
            rng.shuffle(&mut members);
            val.extend_from_slice(&members[..val_count]);
            train.extend_from_slice(&members[val_count..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        TrainValSplit { train, val }
    }

    /// Write the corpus to `dir`: a manifest plus one `.ssau` file per clip.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut entries = Vec::with_capacity(self.clips.len());
        for (i, clip) in self.clips.iter().enumerate() {
            let file = format!("clip-{i:04}.ssau");
            write_raw_clip(&dir.join(&file), &clip.samples, clip.sample_rate)?;
            entries.push(ManifestClip {
                file,
                label: clip.label,
                source_id: clip.source_id.clone(),
            });
        }
        let manifest = Manifest { captions: self.captions.clone(), clips: entries };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format { message: format!("manifest encode: {e}"), offset: None })?;
        crate::ioutil::write_atomic(&dir.join("manifest.json"), json.as_bytes())
    }

    /// Load a corpus directory written by [`Corpus::save`] (or assembled by
    /// hand; `.wav` clip files work too).
    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format { message: format!("manifest parse: {e}"), offset: None })?;
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for entry in &manifest.clips {
            let (samples, rate) = read_clip_file(&dir.join(&entry.file))?;
            clips.push(AudioClip::new(samples, rate, entry.label, entry.source_id.clone())?);
        }
        Corpus::new(clips, manifest.captions)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    captions: Vec<String>,
    clips: Vec<ManifestClip>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClip {
    file: String,
    label: ClassId,
    source_id: String,
}

const PHRASE_BANK: [&str; 8] = [
    "a train is passing by",
    "a helicopter is hovering",
    "a dog is barking",
    "rain is falling on a roof",
    "a siren is wailing",
    "a bell is ringing",
    "an engine is idling",
    "a crowd is cheering",
];

const CLIP_SECONDS: f64 = 1.0;
const SAMPLE_RATE: u32 = 16_000;

/// Synthesize a separable `k`-class corpus: class `c` is a three-harmonic
/// tone at fundamental `180 * 1.5^c` Hz with a class-specific tremolo rate,
/// plus per-clip frequency jitter (±2%), random phase, amplitude wobble and
/// a little noise. Deterministic in `seed`.
pub fn generate_synthetic_corpus(k: usize, per_class: usize, seed: u64) -> Result<Corpus> {
    if k < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 classes to build a corpus, got {k}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Parameter("per_class must be at least 1".into()));
    }
    let n = (CLIP_SECONDS * SAMPLE_RATE as f64) as usize;
    let mut clips = Vec::with_capacity(k * per_class);
    for c in 0..k {
        let fundamental = 180.0 * 1.5f64.powi(c as i32);
        let tremolo_hz = 2.0 + 3.0 * c as f64;
        for i in 0..per_class {
            let mut rng = Rng::derive(seed, &format!("clip:{c}:{i}"));
            let jitter = 1.0 + rng.uniform(-0.02, 0.02);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let amplitude = 0.5 * rng.uniform(0.8, 1.2);
            let f0 = fundamental * jitter;
            let mut samples = Vec::with_capacity(n);
            for t in 0..n {
                let time = t as f64 / SAMPLE_RATE as f64;
                let mut s = 0.0;
                for (h, gain) in [(1.0, 1.0), (2.0, 0.5), (3.0, 0.25)] {
                    s += gain * (std::f64::consts::TAU * f0 * h * time + phase * h).sin();
                }
                let envelope = 0.75 + 0.25 * (std::f64::consts::TAU * tremolo_hz * time).sin();
                let noise = 0.02 * rng.uniform(-1.0, 1.0);
                samples.push((amplitude * envelope * s / 1.75 + noise).clamp(-1.0, 1.0));
            }
            clips.push(AudioClip::new(
                samples,
                SAMPLE_RATE,
                c as ClassId,
                format!("synth-c{c}-{i:03}"),
            )?);
        }
    }
    let captions = (0..k)
        .map(|c| match PHRASE_BANK.get(c) {
            Some(phrase) => phrase.to_string(),
            None => format!("a machine of kind {c} is humming"),
        })
        .collect();
    Corpus::new(clips, captions)
}
