//! Retrieval metrics and controllability probes in the vision-aligned
//! embedding space.
//!
//! Retrieval treats the class captions as a gallery: a clip is scored by
//! cosine similarity between its pooled vision embedding and each class's
//! caption embedding, and ranked. Since cosine ignores scale, the report is
//! invariant to uniform positive rescaling of the clip embeddings.
//!
//! The probes restate the two controllability claims at the embedding level:
//! [`volume_probe`] asks which caption variant an attenuated clip lands
//! nearest to, and [`mix_probe`] asks whether a two-class mixture lands
//! nearer to the composed caption than to either single-class caption.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::alignment::AlignmentModel;
use crate::audio::AudioClip;
use crate::augment::{apply_gain, mix, AudioTransformSpec};
use crate::corpus::Corpus;
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::service::CaptionSource;
use crate::tensor::Tensor;

/// Cosine similarity between two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero-norm vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Rank all classes for one clip embedding: descending cosine similarity,
/// ties broken by ascending class id.
pub fn rank_classes(z_hat_v: &Tensor, class_embeddings: &[Tensor]) -> Result<Vec<usize>> {
    if class_embeddings.is_empty() {
        return Err(Error::Input("ranking needs at least one class embedding".into()));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(class_embeddings.len());
    for (id, emb) in class_embeddings.iter().enumerate() {
        scored.push((id, cosine(z_hat_v.data(), emb.data())?));
    }
    scored.sort_by(|(ia, sa), (ib, sb)| {
        sb.partial_cmp(sa).expect("cosine is finite").then(ia.cmp(ib))
    });
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    /// Percent of clips whose true class ranks first.
    pub top1_accuracy: f64,
    /// Percent of clips whose true class ranks within the top k, per k.
    pub recall_at_k: BTreeMap<usize, f64>,
    /// Counts indexed `[true class][predicted class]`.
    pub confusion: Vec<Vec<u64>>,
    pub sample_count: usize,
}

impl RetrievalReport {
    /// Assemble a report from per-clip class rankings.
    pub fn from_rankings(
        rankings: &[Vec<usize>],
        labels: &[u32],
        class_count: usize,
        k_list: &[usize],
    ) -> Result<RetrievalReport> {
        if rankings.is_empty() {
            return Err(Error::Input("evaluation set is empty".into()));
        }
        if rankings.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} rankings for {} labels",
                rankings.len(),
                labels.len()
            )));
        }
        for k in k_list {
            if *k == 0 {
                return Err(Error::Parameter("recall@k needs k >= 1".into()));
            }
        }
        let mut confusion = vec![vec![0u64; class_count]; class_count];
        let mut top1_hits = 0usize;
        let mut hits_at: BTreeMap<usize, usize> = k_list.iter().map(|&k| (k, 0)).collect();
        for (ranking, &label) in rankings.iter().zip(labels) {
            let mut seen = vec![false; class_count];
            if ranking.len() != class_count {
                return Err(Error::Contract(format!(
                    "ranking has {} entries for {class_count} classes",
                    ranking.len()
                )));
            }
            for &id in ranking {
                if id >= class_count || seen[id] {
                    return Err(Error::Contract(format!(
                        "ranking is not a permutation of 0..{class_count}"
                    )));
                }
                seen[id] = true;
            }
            let position = ranking
                .iter()
                .position(|&id| id == label as usize)
                .ok_or_else(|| Error::Contract(format!("label {label} outside class range")))?;
            if position == 0 {
                top1_hits += 1;
            }
            confusion[label as usize][ranking[0]] += 1;
            for (&k, hits) in hits_at.iter_mut() {
                if position < k {
                    *hits += 1;
                }
            }
        }
        let n = rankings.len();
        let percent = |hits: usize| 100.0 * hits as f64 / n as f64;
        Ok(RetrievalReport {
            top1_accuracy: percent(top1_hits),
            recall_at_k: hits_at.into_iter().map(|(k, h)| (k, percent(h))).collect(),
            confusion,
            sample_count: n,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format { message: format!("report encode: {e}"), offset: None })
    }

    /// Aligned-column rendering for terminals and logs.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16}{:>10}", "samples", self.sample_count);
        let _ = writeln!(out, "{:<16}{:>9.2}%", "top-1 accuracy", self.top1_accuracy);
        for (k, pct) in &self.recall_at_k {
            let _ = writeln!(out, "{:<16}{:>9.2}%", format!("recall@{k}"), pct);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "confusion (rows true, columns predicted)");
        let width = self
            .confusion
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .chain(std::iter::once(self.confusion.len().saturating_sub(1).to_string().len()))
            .max()
            .unwrap_or(1)
            .max(2);
        let _ = write!(out, "{:>width$}", "");
        for j in 0..self.confusion.len() {
            let _ = write!(out, " {j:>width$}");
        }
        let _ = writeln!(out);
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{i:>width$}");
            for count in row {
                let _ = write!(out, " {count:>width$}");
            }
            let _ = writeln!(out);
        }
        out
    }

    /// Confusion counts as CSV, one row per true class.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true_class");
        for j in 0..self.confusion.len() {
            let _ = write!(out, ",predicted_{j}");
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{i}");
            for count in row {
                let _ = write!(out, ",{count}");
            }
            out.push('\n');
        }
        out
    }
}

/// Class-caption retrieval over a set of corpus clips.
pub fn evaluate_retrieval(
    model: &AlignmentModel,
    encoders: &Encoders,
    corpus: &Corpus,
    indices: &[usize],
    k_list: &[usize],
) -> Result<RetrievalReport> {
    if indices.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let class_embeddings: Vec<Tensor> = corpus
        .captions()
        .iter()
        .map(|c| encoders.encode_vision_text(c))
        .collect::<Result<_>>()?;
    let mut rankings = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let clip = &corpus.clips()[i];
        let tokens = encoders.encode_audio(clip)?;
        let pair = model.infer(&tokens, 1)?;
        rankings.push(rank_classes(&pair.z_hat_v, &class_embeddings)?);
        labels.push(clip.label);
    }
    RetrievalReport::from_rankings(&rankings, &labels, corpus.class_count(), k_list)
}

/// One gain level's outcome in a volume probe.
#[derive(Debug, Clone, Serialize)]
pub struct VolumeProbePoint {
    pub alpha: f64,
    /// `(caption, cosine)` in the order the variants were given.
    pub scores: Vec<(String, f64)>,
    pub winner: String,
    /// Winning cosine minus the runner-up's.
    pub margin: f64,
}

/// Score caption variants against gain-scaled versions of one clip.
///
/// Ties go to the variant listed first. A model that picks the same winner
/// at every gain level has not learned the volume axis (the usual cause is
/// probing an untrained model); that is reported as a warning, not an error,
/// and the probe still returns its scores.
pub fn volume_probe(
    model: &AlignmentModel,
    encoders: &Encoders,
    clip: &AudioClip,
    alphas: &[f64],
    variants: &[String],
) -> Result<Vec<VolumeProbePoint>> {
    if alphas.is_empty() {
        return Err(Error::Parameter("volume probe needs a non-empty gain grid".into()));
    }
    if variants.len() < 2 {
        return Err(Error::Parameter("volume probe needs at least two caption variants".into()));
    }
    let variant_embeddings: Vec<Tensor> = variants
        .iter()
        .map(|v| encoders.encode_vision_text(v))
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let scaled = apply_gain(clip, alpha)?;
        let tokens = encoders.encode_audio(&scaled)?;
        let z = model.infer(&tokens, 1)?.z_hat_v;
        let mut scores = Vec::with_capacity(variants.len());
        for (caption, emb) in variants.iter().zip(&variant_embeddings) {
            let s = cosine(z.data(), emb.data())?;
            if !s.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite probe score at alpha {alpha}"
                )));
            }
            scores.push((caption.clone(), s));
        }
        let best = scores
            .iter()
            .enumerate()
            .max_by(|(ia, (_, sa)), (ib, (_, sb))| {
                sa.partial_cmp(sb).expect("finite").then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .expect("variants checked non-empty");
        let mut rest: Vec<f64> = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != best)
            .map(|(_, (_, s))| *s)
            .collect();
        rest.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        points.push(VolumeProbePoint {
            alpha,
            winner: scores[best].0.clone(),
            margin: scores[best].1 - rest[0],
            scores,
        });
    }
    let first = &points[0].winner;
    if points.len() > 1 && points.iter().all(|p| p.winner == *first) {
        log::warn!(
            "volume probe picked {first:?} at every gain level; the model has \
             not learned the volume axis (is it trained?)"
        );
    }
    Ok(points)
}

/// Per-gain aggregation of [`volume_probe`] over many clips.
#[derive(Debug, Clone, Serialize)]
pub struct VolumeBatteryRow {
    pub alpha: f64,
    /// Clips whose winner was the attenuated-audio caption variant.
    pub distant_wins: usize,
    pub total: usize,
}

impl VolumeBatteryRow {
    pub fn distant_fraction(&self) -> f64 {
        self.distant_wins as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VolumeBattery {
    pub rows: Vec<VolumeBatteryRow>,
}

impl VolumeBattery {
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} {:>14} {:>8}", "alpha", "distant wins", "share");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:>8.3} {:>8}/{:<5} {:>7.1}%",
                row.alpha,
                row.distant_wins,
                row.total,
                100.0 * row.distant_fraction()
            );
        }
        out
    }
}

/// Run the volume probe across `indices`, pitting each clip's class caption
/// against its low-gain rewrite, and tally wins per gain level.
pub fn volume_probe_battery(
    model: &AlignmentModel,
    encoders: &Encoders,
    corpus: &Corpus,
    indices: &[usize],
    alphas: &[f64],
    captions: &CaptionSource,
) -> Result<VolumeBattery> {
    if indices.is_empty() {
        return Err(Error::Input("volume battery needs a non-empty clip set".into()));
    }
    let mut rows: Vec<VolumeBatteryRow> = alphas
        .iter()
        .map(|&alpha| VolumeBatteryRow { alpha, distant_wins: 0, total: 0 })
        .collect();
    // the rewrite is the same band for the whole battery: what a low-gain
    // transform would have produced as a pseudo-class caption
    let low_gain = AudioTransformSpec::Gain { alpha: 0.1 };
    for &i in indices {
        let clip = &corpus.clips()[i];
        let base = corpus.caption(clip.label).to_string();
        let distant = captions.transform_caption(&base, &low_gain, 0)?;
        let variants = [base, distant.clone()];
        let points = volume_probe(model, encoders, clip, alphas, &variants)?;
        for (row, point) in rows.iter_mut().zip(&points) {
            row.total += 1;
            if point.winner == distant {
                row.distant_wins += 1;
            }
        }
    }
    Ok(VolumeBattery { rows })
}

/// Outcome of one mixture-versus-captions comparison.
#[derive(Debug, Clone, Serialize)]
pub struct MixProbeOutcome {
    pub composed_caption: String,
    pub composed_score: f64,
    /// `(caption, cosine)` for each single-class caption.
    pub single_scores: Vec<(String, f64)>,
    /// True when the composed caption beats the best single caption minus
    /// the allowed margin.
    pub passed: bool,
}

/// Does a two-class mixture land nearer the composed caption than either
/// single-class caption?
///
/// The pair is canonicalized to ascending class id before mixing and
/// composing, so `(u, v)` and `(v, u)` produce identical scores.
pub fn mix_probe(
    model: &AlignmentModel,
    encoders: &Encoders,
    first: (&AudioClip, &str),
    second: (&AudioClip, &str),
    captions: &CaptionSource,
    margin: f64,
) -> Result<MixProbeOutcome> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::Parameter(format!("margin must be finite and >= 0, got {margin}")));
    }
    if first.0.label == second.0.label {
        return Err(Error::Contract(format!(
            "mix probe needs clips from different classes, both are {}",
            first.0.label
        )));
    }
    let (a, b) = if first.0.label <= second.0.label { (first, second) } else { (second, first) };
    let mixed = mix(a.0, b.0)?;
    let tokens = encoders.encode_audio(&mixed.clip)?;
    let z = model.infer(&tokens, 1)?.z_hat_v;
    let composed_caption = captions.compose_captions(a.1, b.1, 0)?;
    let composed_score = cosine(z.data(), encoders.encode_vision_text(&composed_caption)?.data())?;
    let mut single_scores = Vec::with_capacity(2);
    for caption in [a.1, b.1] {
        let s = cosine(z.data(), encoders.encode_vision_text(caption)?.data())?;
        single_scores.push((caption.to_string(), s));
    }
    let best_single = single_scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    Ok(MixProbeOutcome {
        composed_caption,
        composed_score,
        single_scores,
        passed: composed_score > best_single - margin,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MixGridCell {
    pub first_class: u32,
    pub second_class: u32,
    pub outcome: MixProbeOutcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct MixGrid {
    pub cells: Vec<MixGridCell>,
    pub pass_count: usize,
}

impl MixGrid {
    pub fn pass_fraction(&self) -> f64 {
        self.pass_count as f64 / self.cells.len() as f64
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>5} {:>6} {:>10} {:>12}",
            "u", "v", "pass", "composed", "best single"
        );
        for cell in &self.cells {
            let best = cell
                .outcome
                .single_scores
                .iter()
                .map(|(_, s)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                out,
                "{:>5} {:>5} {:>6} {:>10.4} {:>12.4}",
                cell.first_class,
                cell.second_class,
                if cell.outcome.passed { "yes" } else { "no" },
                cell.outcome.composed_score,
                best
            );
        }
        let _ = writeln!(
            out,
            "passed {}/{} ({:.1}%)",
            self.pass_count,
            self.cells.len(),
            100.0 * self.pass_fraction()
        );
        out
    }
}

/// Run [`mix_probe`] over every unordered cross-class pair, representing
/// each class by its first clip in `indices`.
pub fn mix_probe_grid(
    model: &AlignmentModel,
    encoders: &Encoders,
    corpus: &Corpus,
    indices: &[usize],
    captions: &CaptionSource,
    margin: f64,
) -> Result<MixGrid> {
    let mut representative: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in indices {
        representative.entry(corpus.clips()[i].label).or_insert(i);
    }
    if representative.len() < 2 {
        return Err(Error::Input(format!(
            "mix grid needs clips from at least two classes, found {}",
            representative.len()
        )));
    }
    let classes: Vec<(u32, usize)> = representative.into_iter().collect();
    let mut cells = Vec::new();
    let mut pass_count = 0;
    for (i, &(cu, iu)) in classes.iter().enumerate() {
        for &(cv, iv) in &classes[i + 1..] {
            let outcome = mix_probe(
                model,
                encoders,
                (&corpus.clips()[iu], corpus.caption(cu)),
                (&corpus.clips()[iv], corpus.caption(cv)),
                captions,
                margin,
            )?;
            if outcome.passed {
                pass_count += 1;
            }
            cells.push(MixGridCell { first_class: cu, second_class: cv, outcome });
        }
    }
    Ok(MixGrid { cells, pass_count })
}
