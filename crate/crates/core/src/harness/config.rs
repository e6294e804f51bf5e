//! Experiment configuration: one TOML file with a section per stage.
//!
//! Every field has a default tuned for the desk-scale suite, so an empty
//! file (or none at all) runs the full experiment. CLI flags override
//! individual fields after the file is loaded.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::adapter::ModelConfig;

/// Synthetic corpus shape and word-frequency profile.
///
/// Word frequencies are two-tiered: the `head_count` most frequent words
/// share `1 - rare_mass` of the probability, the rest share `rare_mass`,
/// Zipf-shaped by global rank within each tier. This keeps every tail word
/// individually rare even at small vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub zipf_exponent: f64,
    pub head_count: usize,
    pub rare_mass: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 160,
            frames_per_token: 4,
            feature_dim: 8,
            noise_std: 0.4,
            n_train: 500,
            n_test: 400,
            zipf_exponent: 1.2,
            head_count: 10,
            rare_mass: 0.25,
            seed: 11,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            bail!("vocab_size must be at least 2, got {}", self.vocab_size);
        }
        if self.frames_per_token < 2 {
            bail!(
                "frames_per_token must be at least 2, got {}",
                self.frames_per_token
            );
        }
        if !(self.noise_std >= 0.0) {
            bail!("noise_std must be nonnegative, got {}", self.noise_std);
        }
        if self.n_train == 0 || self.n_test == 0 {
            bail!("n_train and n_test must be positive");
        }
        if !(self.zipf_exponent > 0.0) {
            bail!("zipf_exponent must be positive, got {}", self.zipf_exponent);
        }
        if self.head_count == 0 || self.head_count >= self.vocab_size {
            bail!(
                "head_count must lie in 1..vocab_size, got {} of {}",
                self.head_count,
                self.vocab_size
            );
        }
        if !(0.0..1.0).contains(&self.rare_mass) {
            bail!("rare_mass must lie in [0, 1), got {}", self.rare_mass);
        }
        Ok(())
    }
}

/// Model sizes not fixed by the corpus. `feature_dim` and the class count
/// always come from the corpus configuration, which prevents the two from
/// drifting apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSizes {
    pub enc_hidden: usize,
    pub embed_dim: usize,
    pub joint_hidden: usize,
    pub n_heads: usize,
    pub catalog_hidden: usize,
    pub max_symbols_per_frame: usize,
    pub seed: u64,
}

impl Default for ModelSizes {
    fn default() -> Self {
        Self {
            enc_hidden: 96,
            embed_dim: 64,
            joint_hidden: 64,
            n_heads: 4,
            catalog_hidden: 32,
            max_symbols_per_frame: 5,
            seed: 3,
        }
    }
}

impl ModelSizes {
    pub fn model_config(&self, synth: &SynthConfig) -> ModelConfig {
        ModelConfig {
            feature_dim: synth.feature_dim,
            enc_hidden: self.enc_hidden,
            embed_dim: self.embed_dim,
            joint_hidden: self.joint_hidden,
            classes: synth.vocab_size + 1,
            n_heads: self.n_heads,
            catalog_hidden: self.catalog_hidden,
            max_symbols_per_frame: self.max_symbols_per_frame,
        }
    }
}

/// Which guided-attention loss accompanies the transducer loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaMode {
    None,
    GaCe,
    GaCtc,
}

impl fmt::Display for GaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GaMode::None => "none",
            GaMode::GaCe => "ga_ce",
            GaMode::GaCtc => "ga_ctc",
        })
    }
}

impl FromStr for GaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(GaMode::None),
            "ce" | "ga_ce" | "ga-ce" => Ok(GaMode::GaCe),
            "ctc" | "ga_ctc" | "ga-ctc" => Ok(GaMode::GaCtc),
            other => Err(format!("unknown ga mode {other:?}, expected none, ce, or ctc")),
        }
    }
}

/// Optimization settings shared by pretraining and adapter training.
/// Pretraining reads `loss_threshold` and `ctc_weight` and ignores the
/// guided-attention fields; adapter training is the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Guided-attention weight in the combined objective; ignored when
    /// `ga_mode` is `none`.
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ga_mode: GaMode,
    pub freeze_base: bool,
    /// Derive frame labels by forced alignment against the base model's
    /// auxiliary CTC head instead of the generator's ground-truth spans.
    pub force_align: bool,
    /// Stop early once the epoch's mean loss falls below this; 0 disables.
    pub loss_threshold: f64,
    /// Auxiliary CTC head weight during pretraining.
    pub ctc_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lr: 0.002,
            epochs: 40,
            batch_size: 2,
            ga_mode: GaMode::None,
            freeze_base: true,
            force_align: false,
            loss_threshold: 0.0,
            ctc_weight: 0.3,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!("alpha must lie in [0, 1], got {}", self.alpha);
        }
        if !(self.lr > 0.0) {
            bail!("lr must be positive, got {}", self.lr);
        }
        if self.epochs == 0 || self.batch_size == 0 {
            bail!("epochs and batch_size must be positive");
        }
        if !(self.ctc_weight >= 0.0) {
            bail!("ctc_weight must be nonnegative, got {}", self.ctc_weight);
        }
        Ok(())
    }
}

fn pretrain_defaults() -> TrainConfig {
    TrainConfig {
        lr: 0.001,
        epochs: 80,
        batch_size: 8,
        freeze_base: false,
        loss_threshold: 1.5,
        ..TrainConfig::default()
    }
}

/// Distractor sweep and evaluation settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Distractor counts evaluated per biased system.
    pub sweep: Vec<usize>,
    /// Size of the frequent-word vocabulary; everything below it is rare.
    pub rare_k: usize,
    /// Seed for per-utterance distractor sampling.
    pub eval_seed: u64,
    /// Evaluation worker threads; 0 picks the library default.
    pub workers: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            sweep: vec![0, 5, 20, 50, 100],
            rare_k: 10,
            eval_seed: 29,
            workers: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            bail!("sweep must list at least one distractor count");
        }
        if self.rare_k == 0 {
            bail!("rare_k must be positive");
        }
        Ok(())
    }
}

/// Umbrella configuration covering every stage. A TOML section that is
/// present but partial fills its missing keys from that section's generic
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub model: ModelSizes,
    #[serde(default = "pretrain_defaults")]
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub suite: SuiteConfig,
}

impl Config {
    /// The built-in experiment: no file needed.
    pub fn builtin() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelSizes::default(),
            pretrain: pretrain_defaults(),
            train: TrainConfig::default(),
            suite: SuiteConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.suite.validate()?;
        self.model
            .model_config(&self.synth)
            .validate()
            .map_err(anyhow::Error::msg)?;
        if self.suite.rare_k >= self.synth.vocab_size {
            bail!(
                "rare_k {} leaves no rare words in a vocabulary of {}",
                self.suite.rare_k,
                self.synth.vocab_size
            );
        }
        Ok(())
    }
}
