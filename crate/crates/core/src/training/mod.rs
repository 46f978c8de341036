//! The training loop: dual AdamW over the extended objective with early
//! stopping and checkpointed resume.
//!
//! Each epoch builds its item list (see [`batch`]), walks it in minibatches,
//! and applies one optimizer step per branch per minibatch: text-branch
//! parameters (`adapter_t`, `pooler_t`) under `lr_text`, vision-branch
//! parameters under `lr_vision`. Validation loss is computed on base pairs
//! only, so runs with and without augmentation are comparable; model
//! selection keeps the parameters from the best validation epoch.
//!
//! Everything downstream of `(corpus, config)` is deterministic: epoch item
//! draws are keyed by absolute epoch number, so a resumed run retraces the
//! exact path of a straight one.

pub mod batch;
pub mod checkpoint;
pub mod metrics;
pub mod optimizer;

use std::collections::BTreeMap;
use std::time::Instant;

pub use batch::{build_extended_batch, BatchContext, EpochItem};
pub use checkpoint::Checkpoint;
pub use metrics::{read_metrics, EpochMetrics, MetricsLog};
pub use optimizer::{AdamW, Moments};

use crate::alignment::{alignment_loss_on_graph, alignment_loss_value, AlignmentModel, Branch, ModelConfig};
use crate::augment::{impulse_bank, mix};
use crate::config::{derived_q_max, Config};
use crate::corpus::Corpus;
use crate::encoders::{AudioTokens, CaptionRecord, Encoders};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write the checkpoint after every epoch.
    pub checkpoint_path: Option<std::path::PathBuf>,
    /// Where to stream per-epoch metrics.
    pub metrics_path: Option<std::path::PathBuf>,
    /// Resume from this checkpoint; its config hash must match.
    pub resume_from: Option<std::path::PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The model at its best validation epoch.
    pub model: AlignmentModel,
    /// Final state, as written to the checkpoint path.
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: u64,
    pub best_val_loss: f64,
    /// Completed epochs, including any from a resumed checkpoint.
    pub epochs_run: u64,
    pub stopped_early: bool,
    pub model_config: ModelConfig,
    pub run_hash: [u8; 32],
}

/// Train the alignment model on `corpus` under `config`.
pub fn train(corpus: &Corpus, config: &Config, options: &TrainOptions) -> Result<TrainOutcome> {
    let tcfg = config.training_config();
    let encoders = Encoders::new(config.encoder.clone())?;
    let records = corpus.caption_records(&encoders)?;
    let max_tokens = records.iter().map(|r| r.token_count()).max().unwrap_or(1);
    let model_config = config.model_config(derived_q_max(max_tokens))?;
    let run_hash = config.run_hash(&model_config);
    let mut model = AlignmentModel::new(model_config.clone(), tcfg.seed)?;

    let split = corpus.split(tcfg.seed);
    if split.val.is_empty() {
        return Err(Error::Input(
            "validation split is empty; every class needs at least two clips".into(),
        ));
    }

    let caption_source = config.caption_source()?;
    let impulses = impulse_bank(config.encoder.mel.sample_rate);
    let ctx = BatchContext {
        corpus,
        train_indices: &split.train,
        captions: &caption_source,
        augment: &config.augment,
        impulse_count: impulses.len(),
        config: &tcfg,
    };

    let text_names: Vec<&'static str> = model
        .param_names()
        .into_iter()
        .filter(|n| AlignmentModel::branch_of(n) == Branch::Text)
        .collect();
    let vision_names: Vec<&'static str> = model
        .param_names()
        .into_iter()
        .filter(|n| AlignmentModel::branch_of(n) == Branch::Vision)
        .collect();
    let mut opt_text = AdamW::new(tcfg.lr_text, tcfg.weight_decay);
    let mut opt_vision = AdamW::new(tcfg.lr_vision, tcfg.weight_decay);

    let mut best_params: BTreeMap<String, Vec<f64>> = snapshot_params(&model);
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch: u64 = 0;
    let mut have_best = false;
    let mut start_epoch: u64 = 0;

    if let Some(resume) = &options.resume_from {
        let ck = Checkpoint::read(resume)?;
        if ck.config_hash != run_hash {
            return Err(Error::Config(format!(
                "checkpoint {} was produced under a different configuration",
                resume.display()
            )));
        }
        load_params(&mut model, &ck, "param")?;
        best_params = ck
            .blobs_under("best")
            .map(|(name, values)| (name.to_string(), values.to_vec()))
            .collect();
        restore_optimizer(&mut opt_text, &ck, "opt/text")?;
        restore_optimizer(&mut opt_vision, &ck, "opt/vision")?;
        best_val_loss = ck.best_val_loss;
        best_epoch = ck.best_epoch;
        have_best = true;
        start_epoch = ck.epoch;
    }

    let cache = EncodingCache::new(&encoders, &records);
    let mut log = MetricsLog::create(options.metrics_path.as_deref())?;
    let mut completed = start_epoch;
    let mut stopped_early = false;

    for epoch in start_epoch..tcfg.max_epochs as u64 {
        // strict early stop: never more than `patience` epochs past the best
        if have_best && epoch > best_epoch + tcfg.patience as u64 {
            stopped_early = true;
            break;
        }
        let clock = Instant::now();
        let items = build_extended_batch(&ctx, epoch)?;
        let mut epoch_loss_sum = 0.0;
        for chunk in items.chunks(tcfg.batch_size) {
            model.zero_grads();
            let inv = 1.0 / chunk.len() as f64;
            for item in chunk {
                let (tokens, text_target, vision_target) =
                    cache.realize(corpus, &impulses, item)?;
                let mut g = Graph::new();
                let binding = model.bind(&mut g);
                let f = g.leaf(tokens.tensor());
                let (zt, zv) =
                    model.forward(&mut g, &binding, f, text_target.rows())?;
                let tt = g.leaf(&text_target);
                let vv = g.leaf(&vision_target);
                let (total, _, _) = alignment_loss_on_graph(&mut g, zt, tt, zv, vv)?;
                let value = g.value(total)[0];
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training loss diverged at epoch {epoch} ({value})"
                    )));
                }
                epoch_loss_sum += value;
                let scaled = g.scale(total, inv);
                g.backward(scaled)?;
                model.accumulate_grads(&g, &binding);
            }
            opt_text.step(&mut model, &text_names)?;
            opt_vision.step(&mut model, &vision_names)?;
        }
        let train_loss = epoch_loss_sum / items.len() as f64;

        let (val_loss, val_text, val_vision) =
            validation_loss(&model, &cache, corpus, &split.val)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss diverged at epoch {epoch} ({val_loss})"
            )));
        }

        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            have_best = true;
            best_params = snapshot_params(&model);
        }
        completed = epoch + 1;

        log.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            lr_text: tcfg.lr_text,
            lr_vision: tcfg.lr_vision,
            wall_ms: clock.elapsed().as_millis() as u64,
            val_loss_text: val_text,
            val_loss_vision: val_vision,
        })?;

        if let Some(path) = &options.checkpoint_path {
            let ck = assemble_checkpoint(
                &model,
                &best_params,
                &opt_text,
                &opt_vision,
                run_hash,
                completed,
                best_epoch,
                best_val_loss,
            );
            ck.write(path)?;
        }
    }

    let final_checkpoint = assemble_checkpoint(
        &model,
        &best_params,
        &opt_text,
        &opt_vision,
        run_hash,
        completed,
        best_epoch,
        best_val_loss,
    );
    // hand back the best-validation model
    for (name, values) in &best_params {
        if let Some(p) = model.param_mut(name) {
            p.data_mut().copy_from_slice(values);
        }
    }
    Ok(TrainOutcome {
        model,
        checkpoint: final_checkpoint,
        metrics: log.into_records(),
        best_epoch,
        best_val_loss,
        epochs_run: completed,
        stopped_early,
        model_config,
        run_hash,
    })
}

/// Mean validation loss over base pairs, with per-branch components.
fn validation_loss(
    model: &AlignmentModel,
    cache: &EncodingCache,
    corpus: &Corpus,
    val_indices: &[usize],
) -> Result<(f64, f64, f64)> {
    let mut total = 0.0;
    let mut text = 0.0;
    let mut vision = 0.0;
    for &i in val_indices {
        let clip = &corpus.clips()[i];
        let tokens = cache.base_tokens(i, clip)?;
        let record = &cache.records[clip.label as usize];
        let parts = alignment_loss_value(model, &tokens, record)?;
        total += parts.total;
        text += parts.text;
        vision += parts.vision;
    }
    let n = val_indices.len() as f64;
    Ok((total / n, text / n, vision / n))
}

/// Audio-token and caption-embedding caches. Base-clip tokens are encoded
/// once for the whole run; transformed and mixed audio is encoded on demand
/// (it changes every epoch), while rewritten captions are cached by string
/// (the template space is small).
struct EncodingCache<'a> {
    encoders: &'a Encoders,
    records: &'a [CaptionRecord],
    tokens: std::cell::RefCell<BTreeMap<usize, AudioTokens>>,
    captions: std::cell::RefCell<BTreeMap<String, (Tensor, Tensor)>>,
}

impl<'a> EncodingCache<'a> {
    fn new(encoders: &'a Encoders, records: &'a [CaptionRecord]) -> Self {
        EncodingCache {
            encoders,
            records,
            tokens: Default::default(),
            captions: Default::default(),
        }
    }

    fn base_tokens(&self, index: usize, clip: &crate::audio::AudioClip) -> Result<AudioTokens> {
        if let Some(t) = self.tokens.borrow().get(&index) {
            return Ok(t.clone());
        }
        let t = self.encoders.encode_audio(clip)?;
        self.tokens.borrow_mut().insert(index, t.clone());
        Ok(t)
    }

    /// Targets for a caption string: (`l x d_t` text embedding, `1 x d_v`
    /// vision embedding row).
    fn caption_targets(&self, caption: &str) -> Result<(Tensor, Tensor)> {
        if let Some(pair) = self.captions.borrow().get(caption) {
            return Ok(pair.clone());
        }
        let text = self.encoders.encode_text(caption)?;
        let vision = self.encoders.encode_vision_text(caption)?;
        let d_v = vision.numel();
        let pair = (text, vision.reshaped(vec![1, d_v])?);
        self.captions.borrow_mut().insert(caption.to_string(), pair.clone());
        Ok(pair)
    }

    fn realize(
        &self,
        corpus: &Corpus,
        impulses: &[Vec<f64>],
        item: &EpochItem,
    ) -> Result<(AudioTokens, Tensor, Tensor)> {
        match item {
            EpochItem::Base { clip } => {
                let c = &corpus.clips()[*clip];
                let record = &self.records[c.label as usize];
                let tokens = self.base_tokens(*clip, c)?;
                let d_v = record.vision_embedding.numel();
                Ok((
                    tokens,
                    record.text_embedding.clone(),
                    record.vision_embedding.reshaped(vec![1, d_v])?,
                ))
            }
            EpochItem::Transformed { clip, spec, caption } => {
                let transformed = spec.apply(&corpus.clips()[*clip], impulses)?;
                let tokens = self.encoders.encode_audio(&transformed)?;
                let (text, vision) = self.caption_targets(caption)?;
                Ok((tokens, text, vision))
            }
            EpochItem::Mixed { first, second, caption } => {
                let mixed = mix(&corpus.clips()[*first], &corpus.clips()[*second])?;
                let tokens = self.encoders.encode_audio(&mixed.clip)?;
                let (text, vision) = self.caption_targets(caption)?;
                Ok((tokens, text, vision))
            }
        }
    }
}

fn snapshot_params(model: &AlignmentModel) -> BTreeMap<String, Vec<f64>> {
    model
        .param_names()
        .into_iter()
        .map(|name| (name.to_string(), model.param(name).unwrap().data().to_vec()))
        .collect()
}

fn load_params(model: &mut AlignmentModel, ck: &Checkpoint, namespace: &str) -> Result<()> {
    let expected: Vec<&'static str> = model.param_names();
    let stored: Vec<String> = ck.blobs_under(namespace).map(|(n, _)| n.to_string()).collect();
    if stored.len() != expected.len() {
        return Err(Error::Config(format!(
            "checkpoint stores {} parameters under {namespace}/, model has {}",
            stored.len(),
            expected.len()
        )));
    }
    for name in expected {
        let blob = ck.blob(&format!("{namespace}/{name}"))?;
        let param = model
            .param_mut(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?;
        if blob.len() != param.numel() {
            return Err(Error::Config(format!(
                "checkpoint blob {namespace}/{name} has {} elements, parameter wants {}",
                blob.len(),
                param.numel()
            )));
        }
        param.data_mut().copy_from_slice(blob);
    }
    Ok(())
}

/// Rebuild a model from a checkpoint namespace (`"best"` for the selected
/// model, `"param"` for the final state).
pub fn model_from_checkpoint(
    ck: &Checkpoint,
    model_config: &ModelConfig,
    namespace: &str,
) -> Result<AlignmentModel> {
    let mut model = AlignmentModel::new(model_config.clone(), 0)?;
    load_params(&mut model, ck, namespace)?;
    Ok(model)
}

fn restore_optimizer(opt: &mut AdamW, ck: &Checkpoint, namespace: &str) -> Result<()> {
    let step_blob = ck.blob(&format!("{namespace}/step"))?;
    if step_blob.len() != 1 {
        return Err(Error::Config(format!("{namespace}/step must hold one value")));
    }
    let mut state: BTreeMap<String, Moments> = BTreeMap::new();
    for (name, values) in ck.blobs_under(namespace) {
        if let Some(param) = name.strip_prefix("m/") {
            state
                .entry(param.to_string())
                .or_insert_with(|| Moments { m: Vec::new(), v: Vec::new() })
                .m = values.to_vec();
        } else if let Some(param) = name.strip_prefix("v/") {
            state
                .entry(param.to_string())
                .or_insert_with(|| Moments { m: Vec::new(), v: Vec::new() })
                .v = values.to_vec();
        }
    }
    for (param, moments) in &state {
        if moments.m.len() != moments.v.len() {
            return Err(Error::Config(format!(
                "optimizer state for {param} has mismatched moment lengths"
            )));
        }
    }
    opt.restore(step_blob[0] as u64, state);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn assemble_checkpoint(
    model: &AlignmentModel,
    best_params: &BTreeMap<String, Vec<f64>>,
    opt_text: &AdamW,
    opt_vision: &AdamW,
    run_hash: [u8; 32],
    epoch: u64,
    best_epoch: u64,
    best_val_loss: f64,
) -> Checkpoint {
    let mut blobs = BTreeMap::new();
    for name in model.param_names() {
        blobs.insert(format!("param/{name}"), model.param(name).unwrap().data().to_vec());
    }
    for (name, values) in best_params {
        blobs.insert(format!("best/{name}"), values.clone());
    }
    for (ns, opt) in [("opt/text", opt_text), ("opt/vision", opt_vision)] {
        blobs.insert(format!("{ns}/step"), vec![opt.step_count() as f64]);
        for (param, moments) in opt.state() {
            blobs.insert(format!("{ns}/m/{param}"), moments.m.clone());
            blobs.insert(format!("{ns}/v/{param}"), moments.v.clone());
        }
    }
    Checkpoint { config_hash: run_hash, epoch, best_epoch, best_val_loss, blobs }
}
