use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::GlciVariant;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Ablation, ModelConfig};
use crate::perceptual::{PerceptualConfig, Provenance};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "RIRCI_SEED";

/// Architecture preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// Full widths.
    #[default]
    Full,
    /// Reduced widths with two GLCI blocks.
    Tiny,
}

/// Flat training configuration, read from TOML. Every key has a default, so
/// an empty file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma: f64,
    pub alpha_threshold: f64,

    pub model_preset: ModelPreset,
    /// 0 for the full model, 1–4 for the ablation variants.
    pub ablation: u8,
    pub glci_variant: GlciVariant,

    /// Path to pretrained extractor weights; empty selects seeded random
    /// weights.
    pub perceptual_weights: String,
    pub perceptual_seed: u64,
    pub perceptual_widths: [usize; 3],

    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    /// Write `last.safetensors` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps (0 means no limit).
    pub max_steps: usize,
    /// Validate after every epoch on at most this many samples (0 means all).
    pub val_samples: usize,
    /// Train stage 1 alone (`L_b + λ3·L_m`) for `stage1_epochs`, then stage 2
    /// with stage 1 frozen.
    pub two_phase: bool,
    pub stage1_epochs: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            gamma: w.gamma,
            alpha_threshold: w.alpha_threshold,
            model_preset: ModelPreset::Full,
            ablation: 0,
            glci_variant: GlciVariant::Full,
            perceptual_weights: String::new(),
            perceptual_seed: 0,
            perceptual_widths: [64, 128, 256],
            manifest: PathBuf::from("data/manifest.json"),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 1,
            max_steps: 0,
            val_samples: 0,
            two_phase: false,
            stage1_epochs: 50,
            log_every: 1,
        }
    }
}

fn parse_toml(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(format!("{origin}: {e}")))
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_toml(text, "config")?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Reads `path` (if any), applies `key=value` overrides in order, then
    /// the seed from the environment.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_toml(&text, &p.display().to_string())?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            table.insert(key.clone(), parse_override(raw));
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: i64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV} must be an integer, got {seed:?}")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.two_phase && self.stage1_epochs >= self.epochs {
            return Err(Error::config("two-phase training needs stage1_epochs < epochs"));
        }
        Ablation::from_number(self.ablation)?;
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            gamma: self.gamma,
            alpha_threshold: self.alpha_threshold,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match self.model_preset {
            ModelPreset::Full => ModelConfig::default(),
            ModelPreset::Tiny => ModelConfig::tiny(),
        };
        cfg.stage2.glci_variant = self.glci_variant;
        Ok(cfg.with_ablation(Ablation::from_number(self.ablation)?))
    }

    pub fn perceptual_config(&self) -> PerceptualConfig {
        let provenance = if self.perceptual_weights.is_empty() {
            Provenance::FixedSeedRandom {
                seed: self.perceptual_seed,
            }
        } else {
            Provenance::Pretrained {
                path: PathBuf::from(&self.perceptual_weights),
            }
        };
        PerceptualConfig {
            provenance,
            widths: self.perceptual_widths,
            ..PerceptualConfig::default()
        }
    }
}

/// Interprets a command-line value as a TOML scalar when it parses as one,
/// and as a string otherwise.
fn parse_override(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
