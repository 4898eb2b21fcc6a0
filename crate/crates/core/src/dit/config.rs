use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy_vae::LATENT_CHANNELS;

/// Shape of the denoising transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Latent grid `(T_lat, H_lat, W_lat)` the model is trained on.
    pub grid: [usize; 3],
    pub latent_channels: usize,
    /// Extra per-token input channels between the noise and condition slots
    /// (the upsampled low-res latent for super-resolution).
    pub aux_channels: usize,
    /// Per-head rotary dims for the `(t, h, w)` axes.
    pub rope_split: [usize; 3],
    pub rope_base: f64,
    pub vocab: usize,
    pub mlp_ratio: usize,
    pub time_features: usize,
    pub sampler_steps: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            blocks: 4,
            grid: [5, 8, 8],
            latent_channels: LATENT_CHANNELS,
            aux_channels: 0,
            rope_split: [4, 6, 6],
            rope_base: 100.0,
            vocab: 16,
            mlp_ratio: 4,
            time_features: 32,
            sampler_steps: 16,
        }
    }
}

impl DitConfig {
    /// Small configuration used by unit tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 16,
            heads: 2,
            blocks: 2,
            grid: [3, 2, 2],
            rope_split: [2, 2, 4],
            mlp_ratio: 2,
            time_features: 8,
            sampler_steps: 4,
            vocab: 4,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// noise + aux + condition + mask
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + self.aux_channels + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.rope_split.iter().any(|d| d % 2 != 0) {
            return Err(Error::Config(format!("rope split {:?} must be even", self.rope_split)));
        }
        if self.rope_split.iter().sum::<usize>() != self.head_dim() {
            return Err(Error::Config(format!(
                "rope split {:?} must sum to head dim {}",
                self.rope_split,
                self.head_dim()
            )));
        }
        if !self.time_features.is_multiple_of(2) || self.time_features == 0 {
            return Err(Error::Config("time features must be even and positive".into()));
        }
        if self.blocks == 0 || self.vocab == 0 || self.mlp_ratio == 0 || self.sampler_steps == 0 {
            return Err(Error::Config(
                "blocks, vocab, mlp ratio and sampler steps must be positive".into(),
            ));
        }
        if self.grid.contains(&0) {
            return Err(Error::Config(format!("grid {:?} has an empty axis", self.grid)));
        }
        Ok(())
    }
}
