//! Model shape, loss weights, ablation switches and training settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub t_max: usize,
    /// Width D of word and sentence features.
    pub text_dim: usize,
    /// Width of the conditioned sentence embedding s.
    pub ca_dim: usize,
    pub z_dim: usize,
    /// Hidden channel width, shared by every stage (the SDL compares
    /// per-channel statistics of H_{i-1} against H*_i).
    pub channels: usize,
    pub resolutions: Vec<usize>,
    /// First conv width in each discriminator encoder; doubles per downsampling.
    pub disc_channels: usize,
    /// Width V of the discriminator embedding v.
    pub embed_dim: usize,
    pub vae_latent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2,
            t_max: 8,
            text_dim: 32,
            ca_dim: 16,
            z_dim: 16,
            channels: 8,
            resolutions: vec![8, 16, 32],
            disc_channels: 8,
            embed_dim: 64,
            vae_latent: 32,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.resolutions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.resolutions;
        if r.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if r[0] < 8 || !r[0].is_power_of_two() {
            return Err(Error::Config(format!(
                "first resolution {} must be a power of two ≥ 8",
                r[0]
            )));
        }
        if r.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!("resolutions {r:?} must double per stage")));
        }
        if self.t_max == 0 || self.vocab_size < 2 {
            return Err(Error::Config("t_max must be ≥ 1 and the vocabulary non-trivial".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub alpha: f64,
    /// Conditioning-augmentation KL weight.
    pub ca_kl: f64,
    /// Weight of the matching loss on real (image, caption) pairs, which
    /// keeps the matcher anchored to the data rather than to the generator.
    pub damsm_real: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1e-3,
            lambda2: 1e-1,
            lambda3: 1e-5,
            lambda4: 1.0,
            lambda5: 1.0,
            alpha: 5.0,
            ca_kl: 1.0,
            damsm_real: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.alpha,
            self.ca_kl,
            self.damsm_real,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_sdm: bool,
    pub use_dnm: bool,
    /// Replace the VAE in every DNM by a plain autoencoder (no KL terms).
    pub dnm_star: bool,
    /// Drop both disentangling terms (λ1, λ2); reconstruction stays.
    pub sdl_off: bool,
    pub lambda3_zero: bool,
    /// Stop SDL gradients from reaching the real-image encoder.
    pub sdl_stop_grad_real: bool,
    /// Use standard deviation instead of variance in the SDL.
    pub sdl_use_std: bool,
    pub freeze_text_encoder: bool,
    /// Decode from the posterior mean instead of a sample.
    pub vae_use_mean: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::dr_gan()
    }
}

impl Ablation {
    pub fn base() -> Self {
        Self {
            use_sdm: false,
            use_dnm: false,
            dnm_star: false,
            sdl_off: false,
            lambda3_zero: false,
            sdl_stop_grad_real: false,
            sdl_use_std: false,
            freeze_text_encoder: false,
            vae_use_mean: false,
        }
    }

    pub fn base_sdm() -> Self {
        Self {
            use_sdm: true,
            ..Self::base()
        }
    }

    pub fn base_dnm() -> Self {
        Self {
            use_dnm: true,
            ..Self::base()
        }
    }

    pub fn dr_gan() -> Self {
        Self {
            use_sdm: true,
            use_dnm: true,
            ..Self::base()
        }
    }

    /// The four rows of the main ablation table, in order.
    pub fn table() -> [(&'static str, Ablation); 4] {
        [
            ("Base", Self::base()),
            ("Base+SDM", Self::base_sdm()),
            ("Base+DNM", Self::base_dnm()),
            ("DR-GAN", Self::dr_gan()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dnm_star && !self.use_dnm {
            return Err(Error::Config("dnm_star requires use_dnm".into()));
        }
        Ok(())
    }
}

/// Everything a run needs. Serialized as one flat key–value table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Dataset directory; when absent a synthetic set is generated in memory.
    pub data: Option<PathBuf>,
    pub n_train: usize,
    pub data_seed: u64,
    /// Write an image grid every this many steps (0 disables).
    pub sample_every: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    #[serde(flatten)]
    pub weights: LossWeights,
    #[serde(flatten)]
    pub ablation: Ablation,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 3000,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            data: None,
            n_train: 2000,
            data_seed: 1,
            sample_every: 500,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        self.weights.validate()?;
        self.ablation.validate()?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::format("config", e))?;
        let known: toml::Table = toml::from_str(&Self::default().to_toml()).expect("default config parses");
        // `data` is optional and absent from the default serialization.
        if let Some(k) = table.keys().find(|k| !known.contains_key(*k) && *k != "data") {
            return Err(Error::format("config", format!("unknown key `{k}`")));
        }
        table.try_into().map_err(|e| Error::format("config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
