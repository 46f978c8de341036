//! Extended-objective epoch construction.
//!
//! Each epoch re-derives its item list from the corpus and the epoch number:
//! every training clip appears once as-is, `transform_budget` times under a
//! freshly drawn audio transform (with a matching rewritten caption), and
//! the epoch gets `mix_pair_budget` cross-class mixtures with composed
//! captions. Disabling the extended loss reduces the list to the base pairs.
//!
//! Everything is drawn from named seed streams keyed by `(seed, epoch,
//! position)`, so an epoch's item list is a pure function of the corpus and
//! configuration; resuming at epoch `e` sees exactly the items a straight
//! run would have seen.

use crate::audio::ClassId;
use crate::augment::{AudioTransformSpec, TransformKind};
use crate::config::{AugmentSettings, TrainingConfig};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::service::CaptionSource;

/// One training item, as indices into the corpus plus everything needed to
/// realize the audio and its caption.
#[derive(Debug, Clone, PartialEq)]
pub enum EpochItem {
    /// The clip with its class caption, untouched.
    Base { clip: usize },
    /// A transformed clip with a rewritten caption.
    Transformed { clip: usize, spec: AudioTransformSpec, caption: String },
    /// A cross-class mixture with a composed caption.
    Mixed { first: usize, second: usize, caption: String },
}

pub struct BatchContext<'a> {
    pub corpus: &'a Corpus,
    /// Corpus indices of the training split.
    pub train_indices: &'a [usize],
    pub captions: &'a CaptionSource,
    pub augment: &'a AugmentSettings,
    /// Size of the impulse bank reverb draws index into.
    pub impulse_count: usize,
    pub config: &'a TrainingConfig,
}

/// Build and shuffle the item list for one epoch.
pub fn build_extended_batch(ctx: &BatchContext, epoch: u64) -> Result<Vec<EpochItem>> {
    if ctx.train_indices.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let config = ctx.config;
    let mut items: Vec<EpochItem> =
        ctx.train_indices.iter().map(|&clip| EpochItem::Base { clip }).collect();

    if config.ext_loss_enabled {
        for &clip in ctx.train_indices {
            let base_caption = ctx.corpus.caption(ctx.corpus.clips()[clip].label);
            for j in 0..config.transform_budget {
                let mut rng =
                    Rng::derive(config.seed, &format!("transform:{epoch}:{clip}:{j}"));
                let spec = draw_transform(&mut rng, ctx.augment, ctx.impulse_count);
                let caption_seed = rng.next_u64();
                let caption = ctx.captions.transform_caption(base_caption, &spec, caption_seed)?;
                items.push(EpochItem::Transformed { clip, spec, caption });
            }
        }
        items.extend(draw_mixes(ctx, epoch)?);
    }

    let mut rng = Rng::derive(config.seed, &format!("batch-shuffle:{epoch}"));
    rng.shuffle(&mut items);
    Ok(items)
}

fn draw_transform(rng: &mut Rng, augment: &AugmentSettings, impulse_count: usize) -> AudioTransformSpec {
    match TransformKind::ALL[rng.below(TransformKind::ALL.len() as u64) as usize] {
        TransformKind::Gain => AudioTransformSpec::Gain {
            alpha: rng.uniform(augment.alpha_range[0], augment.alpha_range[1]),
        },
        TransformKind::Reverb => AudioTransformSpec::Reverb {
            impulse: rng.below(impulse_count as u64) as usize,
            wet: rng.uniform(augment.wet_range[0], augment.wet_range[1]),
        },
        TransformKind::PitchShift => {
            let magnitude = 1 + rng.below(augment.semitone_max as u64) as i32;
            let sign = if rng.below(2) == 0 { 1 } else { -1 };
            AudioTransformSpec::PitchShift { semitones: sign * magnitude }
        }
    }
}

fn draw_mixes(ctx: &BatchContext, epoch: u64) -> Result<Vec<EpochItem>> {
    let config = ctx.config;
    if config.mix_pair_budget == 0 {
        return Ok(Vec::new());
    }
    // classes with at least one training clip
    let mut members: Vec<(ClassId, Vec<usize>)> = Vec::new();
    for &i in ctx.train_indices {
        let label = ctx.corpus.clips()[i].label;
        match members.binary_search_by_key(&label, |(c, _)| *c) {
            Ok(pos) => members[pos].1.push(i),
            Err(pos) => members.insert(pos, (label, vec![i])),
        }
    }
    let k = members.len();
    if k < 2 {
        return Err(Error::Config(
            "mixing needs at least two classes in the training split; \
             disable ext_loss or set mix_pair_budget = 0"
                .into(),
        ));
    }
    let mut out = Vec::with_capacity(config.mix_pair_budget);
    for i in 0..config.mix_pair_budget {
        let mut rng = Rng::derive(config.seed, &format!("mix:{epoch}:{i}"));
        // uniform over ordered cross-class pairs
        let u = rng.below(k as u64) as usize;
        let mut v = rng.below(k as u64 - 1) as usize;
        if v >= u {
            v += 1;
        }
        let first = members[u].1[rng.below(members[u].1.len() as u64) as usize];
        let second = members[v].1[rng.below(members[v].1.len() as u64) as usize];
        let caption_seed = rng.next_u64();
        let caption = ctx.captions.compose_captions(
            ctx.corpus.caption(members[u].0),
            ctx.corpus.caption(members[v].0),
            caption_seed,
        )?;
        out.push(EpochItem::Mixed { first, second, caption });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::CaptionEngine;
    use crate::config::Config;
    use crate::corpus::generate_synthetic_corpus;

    fn context<'a>(
        corpus: &'a Corpus,
        indices: &'a [usize],
        captions: &'a CaptionSource,
        config: &'a TrainingConfig,
        augment: &'a AugmentSettings,
    ) -> BatchContext<'a> {
        BatchContext {
            corpus,
            train_indices: indices,
            captions,
            augment,
            impulse_count: 3,
            config,
        }
    }

    fn training_config(ext: bool, h: usize, budget: usize) -> TrainingConfig {
        let mut tc = Config::default().training_config();
        tc.ext_loss_enabled = ext;
        tc.transform_budget = h;
        tc.mix_pair_budget = budget;
        tc.seed = 21;
        tc
    }

    #[test]
    fn item_counting() {
        // 2 classes x 1 clip, h=2, budget=1: 2 base + 4 transformed + 1 mix
        let corpus = generate_synthetic_corpus(2, 1, 0).unwrap();
        let captions = CaptionSource::templates_only(CaptionEngine::default());
        let config = training_config(true, 2, 1);
        let augment = AugmentSettings::default();
        let indices = [0, 1];
        let ctx = context(&corpus, &indices, &captions, &config, &augment);
        let items = build_extended_batch(&ctx, 0).unwrap();
        assert_eq!(items.len(), 7);
        let count = |f: fn(&EpochItem) -> bool| items.iter().filter(|i| f(i)).count();
        assert_eq!(count(|i| matches!(i, EpochItem::Base { .. })), 2);
        assert_eq!(count(|i| matches!(i, EpochItem::Transformed { .. })), 4);
        assert_eq!(count(|i| matches!(i, EpochItem::Mixed { .. })), 1);
    }

    #[test]
    fn ext_disabled_reduces_to_base_pairs() {
        let corpus = generate_synthetic_corpus(2, 2, 0).unwrap();
        let captions = CaptionSource::templates_only(CaptionEngine::default());
        let config = training_config(false, 3, 5);
        let augment = AugmentSettings::default();
        let indices = [0, 1, 2, 3];
        let ctx = context(&corpus, &indices, &captions, &config, &augment);
        let items = build_extended_batch(&ctx, 4).unwrap();
        assert_eq!(items.len(), 4);
        assert!(items.iter().all(|i| matches!(i, EpochItem::Base { .. })));
        // still shuffled
        let clips: Vec<usize> = items
            .iter()
            .map(|i| match i {
                EpochItem::Base { clip } => *clip,
                _ => unreachable!(),
            })
            .collect();
        let mut sorted = clips.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_class_with_mixing_is_a_config_error() {
        let corpus = generate_synthetic_corpus(2, 2, 0).unwrap();
        let captions = CaptionSource::templates_only(CaptionEngine::default());
        let config = training_config(true, 1, 2);
        let augment = AugmentSettings::default();
        // only class-0 clips in the training split
        let indices = [0, 1];
        let ctx = context(&corpus, &indices, &captions, &config, &augment);
        let err = build_extended_batch(&ctx, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        // budget 0 makes the same split fine
        let config = training_config(true, 1, 0);
        let ctx = context(&corpus, &indices, &captions, &config, &augment);
        assert!(build_extended_batch(&ctx, 0).is_ok());
    }

    #[test]
    fn epochs_are_deterministic_but_differ_from_each_other() {
        let corpus = generate_synthetic_corpus(3, 2, 1).unwrap();
        let captions = CaptionSource::templates_only(CaptionEngine::default());
        let config = training_config(true, 2, 3);
        let augment = AugmentSettings::default();
        let indices: Vec<usize> = (0..6).collect();
        let ctx = context(&corpus, &indices, &captions, &config, &augment);
        let a = build_extended_batch(&ctx, 5).unwrap();
        let b = build_extended_batch(&ctx, 5).unwrap();
        assert_eq!(a, b);
        let c = build_extended_batch(&ctx, 6).unwrap();
        assert_ne!(a, c, "fresh draws each epoch");
    }

    #[test]
    fn transform_draws_respect_configured_ranges() {
        let corpus = generate_synthetic_corpus(2, 3, 2).unwrap();
        let captions = CaptionSource::templates_only(CaptionEngine::default());
        let config = training_config(true, 4, 0);
        let augment = AugmentSettings::default();
        let indices: Vec<usize> = (0..6).collect();
        let ctx = context(&corpus, &indices, &captions, &config, &augment);
        let mut seen = [false; 3];
        for epoch in 0..4 {
            for item in build_extended_batch(&ctx, epoch).unwrap() {
                if let EpochItem::Transformed { spec, caption, .. } = item {
                    assert!(!caption.is_empty());
                    match spec {
                        AudioTransformSpec::Gain { alpha } => {
                            assert!((0.1..=0.5).contains(&alpha), "alpha {alpha}");
                            seen[0] = true;
                        }
                        AudioTransformSpec::Reverb { impulse, wet } => {
                            assert!(impulse < 3);
                            assert!((0.2..=0.8).contains(&wet), "wet {wet}");
                            seen[1] = true;
                        }
                        AudioTransformSpec::PitchShift { semitones } => {
                            assert!(semitones != 0 && semitones.abs() <= 4);
                            seen[2] = true;
                        }
                    }
                }
            }
        }
        assert!(seen.iter().all(|s| *s), "all transform kinds drawn: {seen:?}");
    }

    #[test]
    fn mixes_are_cross_class_with_composed_captions() {
        let corpus = generate_synthetic_corpus(3, 3, 5).unwrap();
        let captions = CaptionSource::templates_only(CaptionEngine::default());
        let config = training_config(true, 0, 20);
        let augment = AugmentSettings::default();
        let indices: Vec<usize> = (0..9).collect();
        let ctx = context(&corpus, &indices, &captions, &config, &augment);
        for item in build_extended_batch(&ctx, 0).unwrap() {
            if let EpochItem::Mixed { first, second, caption } = item {
                let la = corpus.clips()[first].label;
                let lb = corpus.clips()[second].label;
                assert_ne!(la, lb, "mixes must cross classes");
                assert!(caption.contains(" and "), "{caption:?}");
            }
        }
    }
}
