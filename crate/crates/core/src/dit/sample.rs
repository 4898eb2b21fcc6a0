use ndarray::{s, Array4, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::DitConfig;
use super::model::velocity;
use super::params::ModelParams;
use crate::conditioning::ConditionLayout;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerOptions {
    pub steps: usize,
    /// Debug ablation: overwrite conditioned latent frames with the condition
    /// after the final step.
    pub anchor_latents: bool,
}

impl SamplerOptions {
    pub fn steps(steps: usize) -> Self {
        Self {
            steps,
            anchor_latents: false,
        }
    }
}

/// Unit Gaussian noise for a latent grid, drawn row-major from `seed`.
pub fn seeded_noise(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

/// Euler integration of the learned velocity from `t = 0` (noise) to `t = 1`.
pub fn generate_from_noise(
    params: &ModelParams,
    cfg: &DitConfig,
    noise: Array4<f64>,
    layout: &ConditionLayout,
    prompt: &[usize],
    opts: SamplerOptions,
) -> Result<Array4<f64>> {
    if opts.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / opts.steps as f64;
    let mut x = noise;
    for i in 0..opts.steps {
        let t = i as f64 * dt;
        let v = velocity(params, cfg, &x, t, layout, prompt)?;
        x.scaled_add(dt, &v);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("latent after sampler step {i}")));
        }
    }
    if opts.anchor_latents {
        for k in layout.occupied() {
            x.slice_mut(s![k, .., .., ..])
                .assign(&layout.cond.slice(s![k, .., .., ..]));
        }
    }
    Ok(x)
}

/// Generates a latent on the layout's grid from seeded noise.
pub fn generate(
    params: &ModelParams,
    cfg: &DitConfig,
    layout: &ConditionLayout,
    prompt: &[usize],
    opts: SamplerOptions,
    seed: u64,
) -> Result<Array4<f64>> {
    let (t, h, w) = layout.grid();
    let noise = seeded_noise((t, h, w, cfg.latent_channels), seed);
    generate_from_noise(params, cfg, noise, layout, prompt, opts)
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0f64, |m, &x, &y| m.max((x - y).abs()))
}
