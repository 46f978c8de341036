//! `ssounds`: synthetic corpora, alignment training, retrieval evaluation,
//! embedding archives, and conditioning export from one binary.
//!
//! Configuration is file-first: `--config` names a TOML file, the
//! `SSOUNDS_CONFIG` environment variable is the fallback, and flags override
//! individual values on top. `train` writes the fully resolved configuration
//! next to its checkpoint as `run-config.toml`; `eval` and
//! `export-conditioning` pick that file up automatically so they rebuild the
//! model under the exact settings that trained it. All artifacts are written
//! atomically (temp file + rename), and every human-readable table has a
//! machine-readable JSON twin.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use ssounds_core::alignment::Pooling;
use ssounds_core::archive::{EmbeddingArchive, RecordKind};
use ssounds_core::config::{derived_q_max, Config, Overrides, CONFIG_ENV_VAR};
use ssounds_core::corpus::{generate_synthetic_corpus, Corpus};
use ssounds_core::encoders::Encoders;
use ssounds_core::evaluation::{
    evaluate_retrieval, mix_probe_grid, volume_probe_battery, RetrievalReport,
};
use ssounds_core::export::ConditioningFile;
use ssounds_core::ioutil::write_atomic;
use ssounds_core::training::{model_from_checkpoint, train, Checkpoint, TrainOptions};

#[derive(Parser)]
#[command(name = "ssounds", version, about, disable_help_subcommand = true)]
struct Cli {
    /// Configuration file (TOML); falls back to $SSOUNDS_CONFIG, then to
    /// built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory artifacts are written into.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Attention,
    Mean,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus (clips + manifest) into --out.
    SynthData {
        /// Number of audio classes.
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// Clips per class.
        #[arg(long, default_value_t = 40)]
        per_class: usize,
    },
    /// Train the alignment adapters and poolers; writes model.ssck,
    /// metrics.ndjson, run-config.toml, and train-summary.json.
    Train {
        /// Corpus directory (from synth-data or compatible).
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Text-branch learning rate override.
        #[arg(long)]
        lr_text: Option<f64>,
        /// Vision-branch learning rate override.
        #[arg(long)]
        lr_vision: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        /// Enable or disable the augmentation-extended objective.
        #[arg(long)]
        ext: Option<bool>,
        /// Pooling ablation switch.
        #[arg(long)]
        pooling: Option<PoolingArg>,
        /// Continue from an existing checkpoint (same configuration).
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Retrieval report and controllability probes on the held-out split.
    Eval {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Recall cutoffs for the retrieval report.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5])]
        ks: Vec<usize>,
        /// Gain levels for the volume probe.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.15, 0.25, 0.5, 1.0])]
        alphas: Vec<f64>,
        /// Slack allowed to the composed caption in the mix probe.
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        /// Skip the volume and mix probes.
        #[arg(long)]
        skip_probes: bool,
        /// Also write the confusion matrix as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Precompute encoder outputs for a corpus into an embedding archive.
    Embed {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
    },
    /// Export per-clip conditioning pairs for a downstream generator.
    ExportConditioning {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(
        if cli.quiet { "error" } else { "info" },
    ))
    .format_timestamp(None)
    .init();
    if let Err(e) = run(cli) {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    match &cli.command {
        Command::SynthData { classes, per_class } => {
            let config = load_config(&cli, None)?;
            let seed = config.training.seed;
            let corpus = generate_synthetic_corpus(*classes, *per_class, seed)?;
            corpus.save(&cli.out)?;
            log::info!(
                "wrote {} clips across {} classes (seed {seed}) to {}",
                corpus.clips().len(),
                corpus.class_count(),
                cli.out.display()
            );
            Ok(())
        }
        Command::Train {
            corpus,
            lr_text,
            lr_vision,
            max_epochs,
            batch_size,
            patience,
            ext,
            pooling,
            resume,
        } => {
            let mut config = load_config(&cli, None)?;
            config.apply_overrides(&Overrides {
                seed: cli.seed,
                lr_text: *lr_text,
                lr_vision: *lr_vision,
                ext_loss_enabled: *ext,
                pooling: pooling.map(|p| match p {
                    PoolingArg::Attention => Pooling::Attention,
                    PoolingArg::Mean => Pooling::Mean,
                }),
                max_epochs: *max_epochs,
                batch_size: *batch_size,
                patience: *patience,
            })?;
            cmd_train(&cli.out, &config, corpus, resume.as_deref())
        }
        Command::Eval { corpus, checkpoint, ks, alphas, margin, skip_probes, csv } => {
            let config = load_config(&cli, Some(checkpoint))?;
            cmd_eval(&cli.out, &config, corpus, checkpoint, ks, alphas, *margin, *skip_probes, *csv)
        }
        Command::Embed { corpus } => {
            let config = load_config(&cli, None)?;
            cmd_embed(&cli.out, &config, corpus)
        }
        Command::ExportConditioning { corpus, checkpoint } => {
            let config = load_config(&cli, Some(checkpoint))?;
            cmd_export_conditioning(&cli.out, &config, corpus, checkpoint)
        }
    }
}

/// Resolve the configuration: explicit flag, then $SSOUNDS_CONFIG, then (for
/// commands that read a checkpoint) the run-config.toml written at training
/// time, then defaults. `--seed` applies on top.
fn load_config(cli: &Cli, checkpoint: Option<&Path>) -> anyhow::Result<Config> {
    let explicit_env = std::env::var_os(CONFIG_ENV_VAR).is_some();
    let mut config = if cli.config.is_some() || explicit_env {
        let (config, path) = Config::find_and_load(cli.config.as_deref())?;
        if let Some(p) = path {
            log::info!("configuration: {}", p.display());
        }
        config
    } else if let Some(sibling) = checkpoint
        .and_then(|c| c.parent())
        .map(|d| d.join("run-config.toml"))
        .filter(|p| p.exists())
    {
        log::info!("configuration: {} (written by train)", sibling.display());
        Config::load(&sibling)?
    } else {
        Config::default()
    };
    if cli.seed.is_some() {
        config.apply_overrides(&Overrides { seed: cli.seed, ..Default::default() })?;
    }
    Ok(config)
}

fn cmd_train(
    out: &Path,
    config: &Config,
    corpus_dir: &Path,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let corpus = Corpus::load(corpus_dir)?;
    let checkpoint_path = out.join("model.ssck");
    let metrics_path = out.join("metrics.ndjson");
    let options = TrainOptions {
        checkpoint_path: Some(checkpoint_path.clone()),
        metrics_path: Some(metrics_path.clone()),
        resume_from: resume.map(Path::to_path_buf),
    };
    let outcome = train(&corpus, config, &options)?;
    // the checkpoint is rewritten per epoch, but an early-stopped run's loop
    // may end between writes; persist the final state unconditionally
    outcome.checkpoint.write(&checkpoint_path)?;

    let resolved = toml::to_string_pretty(config).context("serializing resolved config")?;
    write_atomic(&out.join("run-config.toml"), resolved.as_bytes())?;

    let summary = serde_json::json!({
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "stopped_early": outcome.stopped_early,
        "run_hash": hex(&outcome.run_hash),
        "checkpoint": checkpoint_path.display().to_string(),
        "metrics": metrics_path.display().to_string(),
    });
    write_atomic(
        &out.join("train-summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;

    log::info!(
        "trained {} epoch(s){}; best epoch {} with validation loss {:.6e}",
        outcome.epochs_run,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        outcome.best_epoch,
        outcome.best_val_loss
    );
    log::info!("checkpoint: {}", checkpoint_path.display());
    Ok(())
}

/// Rebuild the trained model a checkpoint stores, verifying the
/// configuration hash first.
fn model_for_checkpoint(
    config: &Config,
    corpus: &Corpus,
    checkpoint: &Path,
) -> anyhow::Result<(ssounds_core::alignment::AlignmentModel, Encoders, Checkpoint)> {
    let encoders = Encoders::new(config.encoder.clone())?;
    let records = corpus.caption_records(&encoders)?;
    let max_tokens = records.iter().map(|r| r.token_count()).max().unwrap_or(1);
    let model_config = config.model_config(derived_q_max(max_tokens))?;
    let ck = Checkpoint::read(checkpoint)?;
    let expected = config.run_hash(&model_config);
    if ck.config_hash != expected {
        bail!(
            "checkpoint {} was trained under a different configuration \
             (hash {} vs {}); point --config at the run-config.toml written \
             next to it, or pass the same settings used for training",
            checkpoint.display(),
            hex(&ck.config_hash),
            hex(&expected)
        );
    }
    let model = model_from_checkpoint(&ck, &model_config, "best")?;
    Ok((model, encoders, ck))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    out: &Path,
    config: &Config,
    corpus_dir: &Path,
    checkpoint: &Path,
    ks: &[usize],
    alphas: &[f64],
    margin: f64,
    skip_probes: bool,
    csv: bool,
) -> anyhow::Result<()> {
    let corpus = Corpus::load(corpus_dir)?;
    let (model, encoders, _) = model_for_checkpoint(config, &corpus, checkpoint)?;
    let split = corpus.split(config.training.seed);

    let report = evaluate_retrieval(&model, &encoders, &corpus, &split.val, ks)?;
    write_atomic(&out.join("retrieval.json"), report.to_json()?.as_bytes())?;
    write_atomic(&out.join("retrieval.txt"), report.text_table().as_bytes())?;
    if csv {
        write_atomic(&out.join("confusion.csv"), report.confusion_csv().as_bytes())?;
    }
    print_report(&report);

    if skip_probes {
        log::info!("probes skipped");
        return Ok(());
    }
    let captions = config.caption_source()?;
    let battery =
        volume_probe_battery(&model, &encoders, &corpus, &split.val, alphas, &captions)?;
    let grid = mix_probe_grid(&model, &encoders, &corpus, &split.val, &captions, margin)?;
    let probes = serde_json::json!({ "volume": battery, "mix": grid });
    write_atomic(&out.join("probes.json"), serde_json::to_string_pretty(&probes)?.as_bytes())?;
    let mut text = String::from("volume probe\n");
    text.push_str(&battery.text_table());
    text.push_str("\nmix probe\n");
    text.push_str(&grid.text_table());
    write_atomic(&out.join("probes.txt"), text.as_bytes())?;
    for line in text.lines() {
        log::info!("{line}");
    }
    Ok(())
}

fn print_report(report: &RetrievalReport) {
    for line in report.text_table().lines() {
        log::info!("{line}");
    }
}

fn cmd_embed(out: &Path, config: &Config, corpus_dir: &Path) -> anyhow::Result<()> {
    let corpus = Corpus::load(corpus_dir)?;
    let encoders = Encoders::new(config.encoder.clone())?;
    let (d_a, d_t, d_v) = (config.encoder.d_a, config.encoder.d_t, config.encoder.d_v);
    let mut archive = EmbeddingArchive::new(d_a, d_t, d_v);
    for clip in corpus.clips() {
        let tokens = encoders.encode_audio(clip)?;
        archive.insert_audio(&clip.source_id, &tokens)?;
    }
    for (class, caption) in corpus.captions().iter().enumerate() {
        let text = encoders.encode_text(caption)?;
        archive.insert(RecordKind::Text, &class.to_string(), text)?;
        let vision = encoders.encode_vision_text(caption)?;
        let d = vision.numel();
        archive.insert(RecordKind::Vision, &class.to_string(), vision.reshaped(vec![1, d])?)?;
    }
    let path = out.join("embeddings.ssea");
    archive.write(&path)?;
    log::info!("wrote {} records to {}", archive.len(), path.display());
    Ok(())
}

fn cmd_export_conditioning(
    out: &Path,
    config: &Config,
    corpus_dir: &Path,
    checkpoint: &Path,
) -> anyhow::Result<()> {
    let corpus = Corpus::load(corpus_dir)?;
    let (model, encoders, _) = model_for_checkpoint(config, &corpus, checkpoint)?;
    let records = corpus.caption_records(&encoders)?;
    let mut file = ConditioningFile::new(config.encoder.d_t, config.encoder.d_v);
    for clip in corpus.clips() {
        let tokens = encoders.encode_audio(clip)?;
        let target_len = records[clip.label as usize].token_count();
        let pair = model.infer(&tokens, target_len)?;
        file.insert(&clip.source_id, pair)?;
    }
    let path = out.join("conditioning.sscp");
    file.write(&path)?;
    log::info!("wrote {} conditioning pairs to {}", file.len(), path.display());
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
