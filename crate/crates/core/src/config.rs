//! Run configuration.
//!
//! One TOML file drives everything: encoder widths, model shape, training
//! hyperparameters, augmentation ranges and caption rules, and the optional
//! caption service. Unknown keys are rejected so typos fail loudly. Every
//! section has working defaults; an empty file is a valid config.
//!
//! Learning rates come in two profiles: `desk` (1e-3 / 1e-4) sized for the
//! built-in hash-projection encoders, and `paper` (1e-5 / 1e-7) matching the
//! published protocol for full-scale pretrained backbones. Explicit
//! `lr_text` / `lr_vision` values override the profile.
//!
//! A canonical SHA-256 over the resolved settings ties checkpoints to the
//! configuration that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{ModelConfig, Pooling};
use crate::augment::{CaptionEngine, CaptionRule};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::service::{CaptionClient, CaptionServiceConfig, CaptionSource};

/// Environment variable consulted when no config path is given.
pub const CONFIG_ENV_VAR: &str = "SSOUNDS_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Learning rates sized for the built-in stub encoders.
    Desk,
    /// The published learning rates (1e-5 text, 1e-7 vision); appropriate
    /// for full-scale pretrained embedding spaces.
    Paper,
}

impl Profile {
    pub fn learning_rates(self) -> (f64, f64) {
        match self {
            Profile::Desk => (1e-3, 1e-4),
            Profile::Paper => (1e-5, 1e-7),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    /// Adapter hidden width; defaults to `2 * max(d_t, d_v)`.
    pub d_hidden: Option<usize>,
    pub head_count: usize,
    /// Learned query tokens per pooler; defaults to a corpus-derived value
    /// (see [`derived_q_max`]).
    pub q_max: Option<usize>,
    pub pooling: Pooling,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { d_hidden: None, head_count: 4, q_max: None, pooling: Pooling::Attention }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub profile: Profile,
    /// Overrides the profile's text-branch learning rate when set.
    pub lr_text: Option<f64>,
    /// Overrides the profile's vision-branch learning rate when set.
    pub lr_vision: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ext_loss_enabled: bool,
    /// Cross-class mixture samples added per epoch.
    pub mix_pair_budget: usize,
    /// Transformed variants added per base sample per epoch.
    pub transform_budget: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            profile: Profile::Desk,
            lr_text: None,
            lr_vision: None,
            weight_decay: 0.01,
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            seed: 7,
            ext_loss_enabled: true,
            mix_pair_budget: 32,
            transform_budget: 3,
        }
    }
}

/// Fully resolved training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr_text: f64,
    pub lr_vision: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ext_loss_enabled: bool,
    pub mix_pair_budget: usize,
    pub transform_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSettings {
    /// Gain draw range for training-time augmentation.
    pub alpha_range: [f64; 2],
    /// Pitch shifts are drawn from ±1..=semitone_max.
    pub semitone_max: u32,
    /// Reverb wet/dry draw range.
    pub wet_range: [f64; 2],
    /// Caption rewrite rules; `None` keeps the built-in set.
    pub rules: Option<Vec<CaptionRule>>,
    /// Compose templates; `None` keeps the built-in set.
    pub compose_templates: Option<Vec<String>>,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings {
            alpha_range: [0.1, 0.5],
            semitone_max: 4,
            wet_range: [0.2, 0.8],
            rules: None,
            compose_templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub model: ModelSettings,
    pub training: TrainingSettings,
    pub augment: AugmentSettings,
    pub caption_service: Option<CaptionServiceConfig>,
}

/// Query-token budget for a corpus whose longest base caption has
/// `max_caption_tokens` tokens: room for two composed captions plus
/// connective words and rewrite phrasing.
pub fn derived_q_max(max_caption_tokens: usize) -> usize {
    2 * max_caption_tokens + 8
}

/// CLI-level settings that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lr_text: Option<f64>,
    pub lr_vision: Option<f64>,
    pub ext_loss_enabled: Option<bool>,
    pub pooling: Option<Pooling>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let config: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Config::from_toml_str(&text)
    }

    /// Resolution order: explicit path, then `SSOUNDS_CONFIG`, then built-in
    /// defaults. Returns the source path when a file was read.
    pub fn find_and_load(explicit: Option<&Path>) -> Result<(Config, Option<PathBuf>)> {
        if let Some(path) = explicit {
            return Ok((Config::load(path)?, Some(path.to_path_buf())));
        }
        if let Some(env_path) = std::env::var_os(CONFIG_ENV_VAR) {
            let path = PathBuf::from(env_path);
            return Ok((Config::load(&path)?, Some(path)));
        }
        Ok((Config::default(), None))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if let Some(h) = self.model.d_hidden {
            if h == 0 {
                return Err(Error::Config("model.d_hidden must be positive".into()));
            }
        }
        if let Some(q) = self.model.q_max {
            if q == 0 {
                return Err(Error::Config("model.q_max must be positive".into()));
            }
        }
        let t = &self.training;
        for (key, lr) in [("lr_text", t.lr_text), ("lr_vision", t.lr_vision)] {
            if let Some(v) = lr {
                // zero is allowed: it freezes a branch, which the optimizer
                // separation checks rely on
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Config(format!(
                        "training.{key} must be finite and non-negative, got {v}"
                    )));
                }
            }
        }
        if !t.weight_decay.is_finite() || t.weight_decay < 0.0 {
            return Err(Error::Config("training.weight_decay must be non-negative".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        if t.max_epochs == 0 {
            return Err(Error::Config("training.max_epochs must be at least 1".into()));
        }
        if t.patience == 0 {
            return Err(Error::Config("training.patience must be at least 1".into()));
        }
        let a = &self.augment;
        if !(a.alpha_range[0] > 0.0) || a.alpha_range[0] > a.alpha_range[1] {
            return Err(Error::Config(format!(
                "augment.alpha_range must satisfy 0 < lo <= hi, got {:?}",
                a.alpha_range
            )));
        }
        if a.semitone_max == 0 {
            return Err(Error::Config("augment.semitone_max must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&a.wet_range[0])
            || !(0.0..=1.0).contains(&a.wet_range[1])
            || a.wet_range[0] > a.wet_range[1]
        {
            return Err(Error::Config(format!(
                "augment.wet_range must satisfy 0 <= lo <= hi <= 1, got {:?}",
                a.wet_range
            )));
        }
        // rule coverage is a load-time contract: surface bad rule sets here,
        // not mid-training
        self.caption_engine()?;
        if let Some(service) = &self.caption_service {
            CaptionClient::new(service)?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.training.seed = seed;
        }
        if o.lr_text.is_some() {
            self.training.lr_text = o.lr_text;
        }
        if o.lr_vision.is_some() {
            self.training.lr_vision = o.lr_vision;
        }
        if let Some(ext) = o.ext_loss_enabled {
            self.training.ext_loss_enabled = ext;
        }
        if let Some(pooling) = o.pooling {
            self.model.pooling = pooling;
        }
        if let Some(v) = o.max_epochs {
            self.training.max_epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.training.batch_size = v;
        }
        if let Some(v) = o.patience {
            self.training.patience = v;
        }
        self.validate()
    }

    /// Concrete training hyperparameters after profile resolution.
    pub fn training_config(&self) -> TrainingConfig {
        let (profile_text, profile_vision) = self.training.profile.learning_rates();
        TrainingConfig {
            lr_text: self.training.lr_text.unwrap_or(profile_text),
            lr_vision: self.training.lr_vision.unwrap_or(profile_vision),
            weight_decay: self.training.weight_decay,
            batch_size: self.training.batch_size,
            max_epochs: self.training.max_epochs,
            patience: self.training.patience,
            seed: self.training.seed,
            ext_loss_enabled: self.training.ext_loss_enabled,
            mix_pair_budget: self.training.mix_pair_budget,
            transform_budget: self.training.transform_budget,
        }
    }

    /// Model shape; `q_max_hint` fills in when the file does not pin one.
    pub fn model_config(&self, q_max_hint: usize) -> Result<ModelConfig> {
        let mc = ModelConfig {
            d_a: self.encoder.d_a,
            d_t: self.encoder.d_t,
            d_v: self.encoder.d_v,
            d_hidden: self
                .model
                .d_hidden
                .unwrap_or(2 * self.encoder.d_t.max(self.encoder.d_v)),
            head_count: self.model.head_count,
            q_max: self.model.q_max.unwrap_or(q_max_hint),
            pooling: self.model.pooling,
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn caption_engine(&self) -> Result<CaptionEngine> {
        let default = CaptionEngine::default();
        match (&self.augment.rules, &self.augment.compose_templates) {
            (None, None) => Ok(default),
            (rules, compose) => {
                let base = CaptionEngine::default();
                let rules = rules.clone().unwrap_or_else(|| base.rules().to_vec());
                let compose = compose.clone().unwrap_or_else(|| base.compose_templates().to_vec());
                CaptionEngine::new(rules, compose)
            }
        }
    }

    pub fn caption_source(&self) -> Result<CaptionSource> {
        let engine = self.caption_engine()?;
        match &self.caption_service {
            Some(service) => Ok(CaptionSource::with_service(engine, CaptionClient::new(service)?)),
            None => Ok(CaptionSource::templates_only(engine)),
        }
    }

    /// Canonical digest of the resolved run settings. Covers encoder, model
    /// (with the final `q_max`), training and augmentation; the caption
    /// service endpoint is operational detail and excluded.
    pub fn run_hash(&self, model: &ModelConfig) -> [u8; 32] {
        #[derive(Serialize)]
        struct HashView<'a> {
            encoder: &'a EncoderConfig,
            model: &'a ModelConfig,
            training: TrainingConfig,
            augment: &'a AugmentSettings,
        }
        let view = HashView {
            encoder: &self.encoder,
            model,
            training: self.training_config(),
            augment: &self.augment,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_config() {
        let c = Config::from_toml_str("").unwrap();
        assert_eq!(c, Config::default());
        let tc = c.training_config();
        assert_eq!(tc.lr_text, 1e-3);
        assert_eq!(tc.lr_vision, 1e-4);
        assert_eq!(tc.batch_size, 16);
        assert_eq!(tc.patience, 10);
    }

    #[test]
    fn paper_profile_learning_rates() {
        let c = Config::from_toml_str("[training]\nprofile = \"paper\"\n").unwrap();
        let tc = c.training_config();
        assert_eq!(tc.lr_text, 1e-5);
        assert_eq!(tc.lr_vision, 1e-7);
    }

    #[test]
    fn explicit_lr_beats_profile() {
        let c = Config::from_toml_str(
            "[training]\nprofile = \"paper\"\nlr_text = 0.5\n",
        )
        .unwrap();
        let tc = c.training_config();
        assert_eq!(tc.lr_text, 0.5);
        assert_eq!(tc.lr_vision, 1e-7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml_str("[training]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = Config::from_toml_str("[nonsense]\nx = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn zero_lr_allowed_negative_rejected() {
        assert!(Config::from_toml_str("[training]\nlr_text = 0.0\n").is_ok());
        assert!(Config::from_toml_str("[training]\nlr_text = -1.0\n").is_err());
        assert!(Config::from_toml_str("[training]\npatience = 0\n").is_err());
    }

    #[test]
    fn custom_rules_round_trip_through_toml() {
        let text = r#"
[augment]
alpha_range = [0.1, 0.5]

[[augment.rules]]
kind = "gain"
max = 0.2
templates = ["{article} faint {subject}{rest}"]

[[augment.rules]]
kind = "gain"
min = 0.2
templates = ["{article} loud {subject}{rest}"]

[[augment.rules]]
kind = "reverb"
templates = ["{article} {subject} echoing"]

[[augment.rules]]
kind = "pitch_shift"
templates = ["{article} shifted {subject}"]
"#;
        let c = Config::from_toml_str(text).unwrap();
        let engine = c.caption_engine().unwrap();
        let spec = crate::augment::AudioTransformSpec::Gain { alpha: 0.15 };
        assert_eq!(
            engine.transform_caption("a dog is barking", &spec, 0).unwrap(),
            "a faint dog is barking"
        );
    }

    #[test]
    fn incomplete_rule_set_fails_at_load() {
        let text = r#"
[[augment.rules]]
kind = "gain"
templates = ["{article} {subject} somewhere"]
"#;
        let err = Config::from_toml_str(text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("reverb") || err.to_string().contains("pitch"), "{err}");
    }

    #[test]
    fn model_config_resolution_and_defaults() {
        let c = Config::default();
        let mc = c.model_config(derived_q_max(6)).unwrap();
        assert_eq!(mc.d_hidden, 64); // 2 * max(32, 32)
        assert_eq!(mc.q_max, 20); // 2*6 + 8
        assert_eq!(mc.head_count, 4);
        let c2 = Config::from_toml_str("[model]\nq_max = 40\nd_hidden = 16\n").unwrap();
        let mc2 = c2.model_config(derived_q_max(6)).unwrap();
        assert_eq!(mc2.q_max, 40);
        assert_eq!(mc2.d_hidden, 16);
    }

    #[test]
    fn run_hash_is_stable_and_sensitive() {
        let c = Config::default();
        let mc = c.model_config(20).unwrap();
        let h1 = c.run_hash(&mc);
        let h2 = c.run_hash(&mc);
        assert_eq!(h1, h2);

        let mut c2 = c.clone();
        c2.training.seed = 8;
        assert_ne!(c2.run_hash(&mc), h1, "seed change must change the hash");

        let mc2 = c.model_config(22).unwrap();
        assert_ne!(c.run_hash(&mc2), h1, "q_max change must change the hash");
    }

    #[test]
    fn overrides_take_precedence_and_are_validated() {
        let mut c = Config::default();
        let o = Overrides {
            seed: Some(99),
            lr_text: Some(0.0),
            pooling: Some(Pooling::Mean),
            ..Overrides::default()
        };
        c.apply_overrides(&o).unwrap();
        assert_eq!(c.training.seed, 99);
        assert_eq!(c.training_config().lr_text, 0.0);
        assert_eq!(c.model.pooling, Pooling::Mean);

        let bad = Overrides { lr_vision: Some(-2.0), ..Overrides::default() };
        assert!(c.apply_overrides(&bad).is_err());
    }

    #[test]
    fn find_and_load_uses_env_fallback() {
        // temp config read through the env var path
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conf.toml");
        std::fs::write(&path, "[training]\nseed = 1234\n").unwrap();
        // set/remove around the call; tests in this binary run in threads,
        // so keep the window minimal and the var name unique to this test
        std::env::set_var(CONFIG_ENV_VAR, &path);
        let (c, source) = Config::find_and_load(None).unwrap();
        std::env::remove_var(CONFIG_ENV_VAR);
        assert_eq!(c.training.seed, 1234);
        assert_eq!(source.as_deref(), Some(path.as_path()));

        let (c2, source2) = Config::find_and_load(None).unwrap();
        assert_eq!(c2, Config::default());
        assert!(source2.is_none());
    }
}
