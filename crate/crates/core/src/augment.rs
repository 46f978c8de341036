//! Audio transformations with paired caption rewrites.
//!
//! Each audio transform (gain, reverb, pitch shift) has a human-readable
//! description and at least one caption rewrite rule, so a transformed clip
//! can be paired with a caption that still describes it. Caption rewriting is
//! template-based and fully deterministic given a seed; an external caption
//! service can be layered on top (see `service`), falling back to these
//! templates.
//!
//! Transforms never change a clip's sample rate or length and never emit
//! samples outside `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, ClassId};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Gain,
    Reverb,
    PitchShift,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] =
        [TransformKind::Gain, TransformKind::Reverb, TransformKind::PitchShift];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Gain => "gain",
            TransformKind::Reverb => "reverb",
            TransformKind::PitchShift => "pitch_shift",
        }
    }
}

/// One concrete audio transformation, parameters included.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioTransformSpec {
    Gain { alpha: f64 },
    /// `impulse` indexes into the impulse bank passed to `apply`.
    Reverb { impulse: usize, wet: f64 },
    PitchShift { semitones: i32 },
}

impl AudioTransformSpec {
    pub fn kind(&self) -> TransformKind {
        match self {
            AudioTransformSpec::Gain { .. } => TransformKind::Gain,
            AudioTransformSpec::Reverb { .. } => TransformKind::Reverb,
            AudioTransformSpec::PitchShift { .. } => TransformKind::PitchShift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AudioTransformSpec::Gain { alpha } => {
                if !(alpha > 0.0) || !alpha.is_finite() {
                    return Err(Error::Parameter(format!("gain alpha must be positive, got {alpha}")));
                }
            }
            AudioTransformSpec::Reverb { wet, .. } => {
                if !(0.0..=1.0).contains(&wet) || !wet.is_finite() {
                    return Err(Error::Parameter(format!("reverb wet must lie in [0, 1], got {wet}")));
                }
            }
            AudioTransformSpec::PitchShift { semitones } => {
                if semitones == 0 {
                    return Err(Error::Parameter(
                        "pitch shift of 0 semitones is the identity; pick a nonzero shift".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Human-readable description of what was done to the audio.
    pub fn description(&self) -> String {
        match *self {
            AudioTransformSpec::Gain { alpha } => {
                // volume_label also validates alpha; here we only describe
                let band = if alpha < 0.2 {
                    "low"
                } else if alpha < 0.5 {
                    "medium"
                } else {
                    "high"
                };
                format!("volume scaled by {alpha:.3} ({band})")
            }
            AudioTransformSpec::Reverb { wet, .. } => format!("reverberation added, wet {wet:.2}"),
            AudioTransformSpec::PitchShift { semitones } => {
                format!("pitch shifted {semitones:+} semitones")
            }
        }
    }

    /// The scalar the caption rules test their parameter range against.
    fn rule_param(&self) -> f64 {
        match *self {
            AudioTransformSpec::Gain { alpha } => alpha,
            AudioTransformSpec::Reverb { wet, .. } => wet,
            AudioTransformSpec::PitchShift { semitones } => semitones as f64,
        }
    }

    pub fn apply(&self, clip: &AudioClip, impulses: &[Vec<f64>]) -> Result<AudioClip> {
        self.validate()?;
        match *self {
            AudioTransformSpec::Gain { alpha } => apply_gain(clip, alpha),
            AudioTransformSpec::Reverb { impulse, wet } => {
                let ir = impulses.get(impulse).ok_or_else(|| {
                    Error::Parameter(format!(
                        "impulse id {impulse} out of range ({} available)",
                        impulses.len()
                    ))
                })?;
                apply_reverb(clip, ir, wet)
            }
            AudioTransformSpec::PitchShift { semitones } => pitch_shift(clip, semitones),
        }
    }
}

/// Scale samples by `alpha`, clipping to `[-1, 1]`.
pub fn apply_gain(clip: &AudioClip, alpha: f64) -> Result<AudioClip> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("gain alpha must be positive, got {alpha}")));
    }
    let samples = clip.samples.iter().map(|s| (s * alpha).clamp(-1.0, 1.0)).collect();
    AudioClip::new(samples, clip.sample_rate, clip.label, clip.source_id.clone())
}

/// Volume band for a gain factor: low below 0.2, medium in [0.2, 0.5),
/// high at 0.5 and above.
pub fn volume_label(alpha: f64) -> Result<&'static str> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("gain alpha must be positive, got {alpha}")));
    }
    Ok(if alpha < 0.2 {
        "low"
    } else if alpha < 0.5 {
        "medium"
    } else {
        "high"
    })
}

/// Wet/dry blend of the clip with its convolution against an impulse
/// response. The convolution tail past the original length is dropped, the
/// wet signal is rescaled to the dry signal's peak, and the blend is
/// peak-limited to 1.
pub fn apply_reverb(clip: &AudioClip, impulse: &[f64], wet: f64) -> Result<AudioClip> {
    if impulse.is_empty() {
        return Err(Error::Parameter("impulse response is empty".into()));
    }
    if !(0.0..=1.0).contains(&wet) || !wet.is_finite() {
        return Err(Error::Parameter(format!("reverb wet must lie in [0, 1], got {wet}")));
    }
    let dry = &clip.samples;
    let n = dry.len();
    let mut conv = vec![0.0; n];
    for (i, c) in conv.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, h) in impulse.iter().enumerate().take(i + 1) {
            acc += dry[i - k] * h;
        }
        *c = acc;
    }
    let peak = |xs: &[f64]| xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let dry_peak = peak(dry);
    let conv_peak = peak(&conv);
    let scale = if conv_peak > 0.0 { dry_peak / conv_peak } else { 1.0 };
    let mut out: Vec<f64> = dry
        .iter()
        .zip(&conv)
        .map(|(d, c)| (1.0 - wet) * d + wet * c * scale)
        .collect();
    let out_peak = peak(&out);
    if out_peak > 1.0 {
        for x in &mut out {
            *x /= out_peak;
        }
    }
    AudioClip::new(out, clip.sample_rate, clip.label, clip.source_id.clone())
}

/// Shift pitch by resampling: the signal is read at a stride of
/// `2^(semitones/12)` with linear interpolation, which transposes all
/// frequencies by that factor. Shifting up shortens the content, so the
/// result is zero-padded back to the original length; shifting down
/// truncates. Duration and sample rate are preserved.
pub fn pitch_shift(clip: &AudioClip, semitones: i32) -> Result<AudioClip> {
    if semitones == 0 {
        return Err(Error::Parameter(
            "pitch shift of 0 semitones is the identity; pick a nonzero shift".into(),
        ));
    }
    let factor = 2f64.powf(semitones as f64 / 12.0);
    let src = &clip.samples;
    let n = src.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = i as f64 * factor;
        let i0 = pos.floor() as usize;
        if i0 >= n {
            break;
        }
        let frac = pos - i0 as f64;
        let a = src[i0];
        let b = src[(i0 + 1).min(n - 1)];
        // linear interpolation stays inside [min(a,b), max(a,b)], so the
        // [-1, 1] bound is inherited from the input
        *o = a + frac * (b - a);
    }
    AudioClip::new(out, clip.sample_rate, clip.label, clip.source_id.clone())
}

/// An averaged two-clip mixture together with both source labels.
#[derive(Debug, Clone)]
pub struct MixedClip {
    pub clip: AudioClip,
    pub labels: (ClassId, ClassId),
}

/// Average two clips sample-wise (the shorter is zero-padded). Scaling by
/// 0.5 keeps the sum inside `[-1, 1]` without systematic clipping.
pub fn mix(a: &AudioClip, b: &AudioClip) -> Result<MixedClip> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::Input(format!(
            "cannot mix clips with different sample rates ({} vs {})",
            a.sample_rate, b.sample_rate
        )));
    }
    let n = a.samples.len().max(b.samples.len());
    let at = |xs: &[f64], i: usize| xs.get(i).copied().unwrap_or(0.0);
    let samples: Vec<f64> = (0..n)
        .map(|i| (0.5 * (at(&a.samples, i) + at(&b.samples, i))).clamp(-1.0, 1.0))
        .collect();
    let clip = AudioClip::new(
        samples,
        a.sample_rate,
        a.label,
        format!("{}+{}", a.source_id, b.source_id),
    )?;
    Ok(MixedClip { clip, labels: (a.label, b.label) })
}

/// Deterministic bank of synthetic impulse responses: a unit spike followed
/// by an exponentially decaying noise tail. Three room sizes.
pub fn impulse_bank(sample_rate: u32) -> Vec<Vec<f64>> {
    const BANK_SEED: u64 = 0x4952_5f42_414e_4b31; // fixed; not tied to any corpus seed
    let decays = [0.08, 0.18, 0.35];
    decays
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            let mut rng = Rng::derive(BANK_SEED, &format!("impulse:{i}"));
            let len = ((3.0 * tau * sample_rate as f64) as usize).max(2);
            let mut h = Vec::with_capacity(len);
            h.push(1.0);
            for n in 1..len {
                let envelope = (-(n as f64) / (tau * sample_rate as f64)).exp();
                h.push(0.5 * envelope * rng.uniform(-1.0, 1.0));
            }
            h
        })
        .collect()
}

/// A caption rewrite rule: which transforms it applies to, and the templates
/// to choose among.
///
/// `min`/`max` bound the transform's scalar parameter (gain alpha, reverb
/// wet, or semitones) as a half-open range `[min, max)`; a missing bound is
/// unbounded. Templates may use `{article}`, `{subject}`, `{rest}` and
/// `{caption}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRule {
    pub kind: TransformKind,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
    pub templates: Vec<String>,
}

impl CaptionRule {
    fn matches(&self, spec: &AudioTransformSpec) -> bool {
        if self.kind != spec.kind() {
            return false;
        }
        let p = spec.rule_param();
        self.min.map_or(true, |lo| p >= lo) && self.max.map_or(true, |hi| p < hi)
    }

    fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config(format!("rule for {} has no templates", self.kind.name())));
        }
        for t in &self.templates {
            if !t.contains("{subject}") && !t.contains("{caption}") {
                return Err(Error::Config(format!(
                    "template {t:?} drops the subject; every rewrite must keep \
                     {{subject}} or {{caption}}"
                )));
            }
        }
        Ok(())
    }
}

/// Template-based caption rewriting.
#[derive(Debug, Clone)]
pub struct CaptionEngine {
    rules: Vec<CaptionRule>,
    compose_templates: Vec<String>,
}

fn default_rules() -> Vec<CaptionRule> {
    let rule = |kind, min, max, templates: &[&str]| CaptionRule {
        kind,
        min,
        max,
        templates: templates.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        // quiet sounds read as far away; a single template keeps the phrasing
        // stable for probes that look for the word "distant"
        rule(TransformKind::Gain, None, Some(0.2), &["{article} distant {subject}{rest}"]),
        rule(
            TransformKind::Gain,
            Some(0.2),
            Some(0.5),
            &[
                "{article} {subject} some distance away",
                "{article} {subject} in the middle distance",
            ],
        ),
        rule(
            TransformKind::Gain,
            Some(0.5),
            None,
            &["{article} loud {subject}{rest}", "{article} {subject} close by"],
        ),
        rule(TransformKind::Reverb, None, None, &["{article} {subject} echoing in a tunnel"]),
        rule(
            TransformKind::PitchShift,
            Some(0.0),
            None,
            &[
                "{article} high pitched {subject}{rest}",
                "{article} {subject} at a higher pitch than usual",
            ],
        ),
        rule(
            TransformKind::PitchShift,
            None,
            Some(0.0),
            &[
                "{article} low pitched {subject}{rest}",
                "{article} {subject} at a lower pitch than usual",
            ],
        ),
    ]
}

impl Default for CaptionEngine {
    fn default() -> Self {
        CaptionEngine::new(default_rules(), vec!["{a} and {b}".to_string()])
            .expect("built-in rules are valid")
    }
}

impl CaptionEngine {
    pub fn rules(&self) -> &[CaptionRule] {
        &self.rules
    }

    pub fn compose_templates(&self) -> &[String] {
        &self.compose_templates
    }

    pub fn new(rules: Vec<CaptionRule>, compose_templates: Vec<String>) -> Result<Self> {
        for rule in &rules {
            rule.validate()?;
        }
        for kind in TransformKind::ALL {
            if !rules.iter().any(|r| r.kind == kind) {
                return Err(Error::Config(format!(
                    "no caption rewrite rule registered for transform {}",
                    kind.name()
                )));
            }
        }
        if compose_templates.is_empty() {
            return Err(Error::Config("no compose templates registered".into()));
        }
        for t in &compose_templates {
            if !t.contains("{a}") || !t.contains("{b}") {
                return Err(Error::Config(format!(
                    "compose template {t:?} must mention both {{a}} and {{b}}"
                )));
            }
        }
        Ok(CaptionEngine { rules, compose_templates })
    }

    /// Rewrite `caption` to describe the transformed audio. Deterministic in
    /// `(caption, spec, seed)`.
    pub fn transform_caption(
        &self,
        caption: &str,
        spec: &AudioTransformSpec,
        seed: u64,
    ) -> Result<String> {
        spec.validate()?;
        let rule = self
            .rules
            .iter()
            .find(|r| r.matches(spec))
            .ok_or_else(|| {
                Error::Config(format!(
                    "no caption rewrite rule covers {} with parameter {}",
                    spec.kind().name(),
                    spec.rule_param()
                ))
            })?;
        let parts = CaptionParts::parse(caption)?;
        let mut rng = Rng::derive(seed, "caption-template");
        let template = &rule.templates[rng.below(rule.templates.len() as u64) as usize];
        Ok(parts.fill(template))
    }

    /// Join two captions into one describing both sounds at once.
    /// Identical captions are refused: same-class mixtures are not a scene
    /// of two concepts.
    pub fn compose_captions(&self, a: &str, b: &str, seed: u64) -> Result<String> {
        let a = normalize_spaces(a);
        let b = normalize_spaces(b);
        if a.is_empty() || b.is_empty() {
            return Err(Error::Input("cannot compose an empty caption".into()));
        }
        if a == b {
            return Err(Error::Contract(format!(
                "refusing to compose a caption with itself ({a:?})"
            )));
        }
        let mut rng = Rng::derive(seed, "caption-compose");
        let template =
            &self.compose_templates[rng.below(self.compose_templates.len() as u64) as usize];
        Ok(normalize_spaces(&template.replace("{a}", &a).replace("{b}", &b)))
    }
}

/// A caption split into an optional leading article, the subject word, and
/// whatever follows.
#[derive(Debug, Clone, PartialEq)]
struct CaptionParts {
    article: String,
    subject: String,
    /// Includes its leading space when non-empty.
    rest: String,
    caption: String,
}

impl CaptionParts {
    fn parse(caption: &str) -> Result<CaptionParts> {
        let norm = normalize_spaces(caption);
        let mut words = norm.split(' ');
        let first = words
            .next()
            .filter(|w| !w.is_empty())
            .ok_or_else(|| Error::Input("caption is empty".into()))?;
        let (article, subject) = if matches!(first.to_ascii_lowercase().as_str(), "a" | "an" | "the")
        {
            let subject = words
                .next()
                .ok_or_else(|| Error::Input(format!("caption {caption:?} is only an article")))?;
            (first.to_string(), subject.to_string())
        } else {
            (String::new(), first.to_string())
        };
        let tail: Vec<&str> = words.collect();
        let rest = if tail.is_empty() { String::new() } else { format!(" {}", tail.join(" ")) };
        Ok(CaptionParts { article, subject, rest, caption: norm })
    }

    fn fill(&self, template: &str) -> String {
        let filled = template
            .replace("{article}", &self.article)
            .replace("{subject}", &self.subject)
            .replace("{rest}", &self.rest)
            .replace("{caption}", &self.caption);
        normalize_spaces(&filled)
    }
}

fn normalize_spaces(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
