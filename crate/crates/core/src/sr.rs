//! Super-resolution transformer with shared rotary positions.
//!
//! The SR model sees the usual channel-concatenated target tokens, with the
//! nearest-upsampled low-res latent in the auxiliary slot. For every
//! condition it additionally appends one latent frame of clean condition
//! tokens at the tail of the sequence. Each tail token is rotated with the
//! position of the target cell it guides, so its relative position to that
//! cell is zero. Clip conditions contribute their first latent frame only.

use ndarray::{s, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::conditioning::{ConditionLayout, ConditionSamplerConfig, TrainingClip};
use crate::dit::model::{grid_to_rows, grid_tokens, rows_to_grid, TokenSeq};
use crate::dit::train::{draw_sample, FlowSample};
use crate::dit::{forward_tokens, seeded_noise, Bound, DitConfig, LossTape, ModelParams, Optimizer, ParamVec};
use crate::dit::{TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::toy_vae::{PixelVideo, ToyVae, LATENT_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    /// Spatial upscale factor between the low-res and SR latent grids.
    pub upscale: usize,
    /// Transformer on the SR grid; `aux_channels` carries the low-res latent.
    pub model: DitConfig,
    /// Append shared-position condition tokens. Off gives the
    /// channel-concat-only ablation.
    pub shared_rope: bool,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            upscale: 2,
            model: DitConfig {
                embed_dim: 32,
                heads: 2,
                blocks: 2,
                grid: [3, 8, 8],
                aux_channels: LATENT_CHANNELS,
                rope_split: [4, 6, 6],
                mlp_ratio: 2,
                time_features: 16,
                sampler_steps: 8,
                ..DitConfig::default()
            },
            shared_rope: true,
        }
    }
}

impl SrConfig {
    pub fn ablation(&self) -> Self {
        Self {
            shared_rope: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.upscale < 2 {
            return Err(Error::Config(format!("upscale {} must be at least 2", self.upscale)));
        }
        if self.model.aux_channels != self.model.latent_channels {
            return Err(Error::Config(
                "SR model needs one auxiliary channel per latent channel".into(),
            ));
        }
        self.model.validate()
    }

    /// Low-res grid `(T, H / u, W / u)` for the SR grid of the model.
    pub fn lowres_grid(&self) -> (usize, usize, usize) {
        let [t, h, w] = self.model.grid;
        (t, h / self.upscale, w / self.upscale)
    }
}

/// Nearest-neighbour spatial upsampling by `u`.
pub fn upsample_nearest(z: &Array4<f64>, u: usize) -> Array4<f64> {
    let (t, h, w, c) = z.dim();
    Array4::from_shape_fn((t, h * u, w * u, c), |(a, y, x, ch)| z[[a, y / u, x / u, ch]])
}

/// Mean pooling over `u × u` spatial blocks. For patch-mean latents this is
/// exactly the latent at a `u` times larger patch.
pub fn downsample_mean(z: &Array4<f64>, u: usize) -> Result<Array4<f64>> {
    let (t, h, w, c) = z.dim();
    if u == 0 || h % u != 0 || w % u != 0 {
        return Err(Error::Shape(format!("{h}x{w} grid is not divisible by {u}")));
    }
    let area = (u * u) as f64;
    Ok(Array4::from_shape_fn((t, h / u, w / u, c), |(a, y, x, ch)| {
        let mut acc = 0.0;
        for dy in 0..u {
            for dx in 0..u {
                acc += z[[a, y * u + dy, x * u + dx, ch]];
            }
        }
        acc / area
    }))
}

/// Token sequence for one SR step: all target tokens, then one shared-position
/// latent frame per rope anchor when `cfg.shared_rope` is set.
pub fn build_sr_sequence(
    cfg: &SrConfig,
    x_t: &Array4<f64>,
    lowres: &Array4<f64>,
    layout: &ConditionLayout,
) -> Result<TokenSeq> {
    let (t, h, w, c) = x_t.dim();
    let u = cfg.upscale;
    if lowres.dim() != (t, h / u, w / u, c) || h % u != 0 || w % u != 0 {
        return Err(Error::Shape(format!(
            "low-res latent {:?} is not the SR grid {:?} divided by {u}",
            lowres.dim(),
            (t, h, w, c)
        )));
    }
    let up = upsample_nearest(lowres, u);
    let mut seq = grid_tokens(&cfg.model, x_t, Some(&up), layout)?;
    if !cfg.shared_rope || layout.rope_anchors.is_empty() {
        return Ok(seq);
    }
    let cin = cfg.model.input_channels();
    let cells = h * w;
    let mut tail = Array2::zeros((layout.rope_anchors.len() * cells, cin));
    let mut row = 0;
    for anchor in &layout.rope_anchors {
        let a = anchor.latent_t;
        if a >= t {
            return Err(Error::Range {
                what: "rope anchor",
                index: a,
                len: t,
            });
        }
        for y in 0..h {
            for x in 0..w {
                let mut col = 0;
                for ch in 0..c {
                    tail[[row, col]] = layout.cond[[a, y, x, ch]];
                    col += 1;
                }
                for ch in 0..c {
                    tail[[row, col]] = up[[a, y, x, ch]];
                    col += 1;
                }
                for ch in 0..c {
                    tail[[row, col]] = layout.cond[[a, y, x, ch]];
                    col += 1;
                }
                tail[[row, col]] = layout.mask[a];
                seq.positions.push([a, y, x]);
                row += 1;
            }
        }
    }
    seq.features = ndarray::concatenate(Axis(0), &[seq.features.view(), tail.view()]).expect("matching token widths");
    Ok(seq)
}

/// Velocity over the target tokens of `seq`, as `[targets, C]` rows.
pub fn sr_forward(
    params: &ModelParams,
    cfg: &SrConfig,
    seq: &TokenSeq,
    t: f64,
    prompt: &[usize],
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let out = forward_tokens(&mut tape, &bound, params, &cfg.model, seq, t, prompt)?;
    Ok(tape.value(out).clone())
}

pub fn sr_velocity(
    params: &ModelParams,
    cfg: &SrConfig,
    x_t: &Array4<f64>,
    t: f64,
    lowres: &Array4<f64>,
    layout: &ConditionLayout,
    prompt: &[usize],
) -> Result<Array4<f64>> {
    let seq = build_sr_sequence(cfg, x_t, lowres, layout)?;
    let rows = sr_forward(params, cfg, &seq, t, prompt)?;
    let (a, b, c, _) = x_t.dim();
    Ok(rows_to_grid(&rows, (a, b, c)))
}

/// Euler sampling of the SR latent. The sequence is rebuilt every step; the
/// tail tokens keep their clean condition content throughout.
pub fn sr_generate(
    params: &ModelParams,
    cfg: &SrConfig,
    lowres: &Array4<f64>,
    layout: &ConditionLayout,
    prompt: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Array4<f64>> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let (t, h, w) = layout.grid();
    let mut x = seeded_noise((t, h, w, cfg.model.latent_channels), seed);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let v = sr_velocity(params, cfg, &x, i as f64 * dt, lowres, layout, prompt)?;
        x.scaled_add(dt, &v);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("SR latent after step {i}")));
        }
    }
    Ok(x)
}

/// Adds one per-channel colour offset to every cell of a latent.
pub fn color_shift(z: &Array4<f64>, shift: &[f64]) -> Array4<f64> {
    let mut out = z.clone();
    for (ch, &d) in shift.iter().enumerate() {
        out.slice_mut(s![.., .., .., ch]).mapv_inplace(|v| v + d);
    }
    out
}

pub fn draw_shift<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Vec<f64> {
    let n = Normal::new(0.0, std.max(0.0)).expect("finite std");
    (0..LATENT_CHANNELS).map(|_| n.sample(rng)).collect()
}

/// 2× spatially pooled, truncated copy of a training clip, encoded with
/// `vae` for use as SR ground truth.
pub fn sr_training_clip(clip: &TrainingClip, vae: &ToyVae, pool: usize, frames: usize) -> Result<TrainingClip> {
    let src = clip.video.frames();
    let (t, h, w, c) = src.dim();
    if frames == 0 || frames > t || pool == 0 || h % pool != 0 || w % pool != 0 {
        return Err(Error::Shape(format!(
            "cannot pool {h}x{w}x{t} by {pool} to {frames} frames"
        )));
    }
    let area = (pool * pool) as f64;
    let pooled = Array4::from_shape_fn((frames, h / pool, w / pool, c), |(f, y, x, ch)| {
        let mut acc = 0.0;
        for dy in 0..pool {
            for dx in 0..pool {
                acc += src[[f, y * pool + dy, x * pool + dx, ch]];
            }
        }
        acc / area
    });
    let video = PixelVideo::new(pooled, clip.video.fps)?;
    let latent = vae.encode(&video)?.mean;
    let actions = clip
        .actions
        .iter()
        .filter(|a| a.start < frames)
        .map(|a| crate::conditioning::ActionInterval {
            start: a.start,
            end: a.end.min(frames - 1),
        })
        .collect::<Vec<_>>();
    let actions = if actions.is_empty() {
        vec![crate::conditioning::ActionInterval {
            start: 0,
            end: frames - 1,
        }]
    } else {
        actions
    };
    Ok(TrainingClip {
        video,
        latent,
        actions,
        prompt_id: clip.prompt_id,
    })
}

/// One SR training example: a flow sample on the SR grid plus its
/// (possibly colour-shifted) low-res input.
#[derive(Debug, Clone)]
pub struct SrSample {
    pub flow: FlowSample,
    pub lowres: Array4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrTrainConfig {
    /// Std of the per-video colour offset applied to the low-res input.
    pub shift_std: f64,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        Self { shift_std: 0.08 }
    }
}

pub fn draw_sr_sample<R: Rng + ?Sized>(
    cfg: &SrConfig,
    dataset: &[TrainingClip],
    vae: &ToyVae,
    sampler: &ConditionSamplerConfig,
    scfg: &SrTrainConfig,
    rng: &mut R,
) -> Result<SrSample> {
    let flow = draw_sample(dataset, vae, sampler, rng)?;
    let shift = draw_shift(scfg.shift_std, rng);
    let lowres = color_shift(&downsample_mean(&flow.x, cfg.upscale)?, &shift);
    Ok(SrSample { flow, lowres })
}

fn sr_record(params: &ModelParams, cfg: &SrConfig, s: &SrSample) -> Result<LossTape> {
    let seq = build_sr_sequence(cfg, &s.flow.noisy(), &s.lowres, &s.flow.layout)?;
    LossTape::record_seq(
        params,
        &cfg.model,
        &seq,
        s.flow.t,
        &s.flow.prompt,
        grid_to_rows(&s.flow.target()),
    )
}

/// Mean SR flow loss of a batch and its gradient, summed in batch order.
pub fn sr_grad(params: &ModelParams, cfg: &SrConfig, batch: &[SrSample]) -> Result<(f64, ParamVec)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = batch.len() as f64;
    let parts: Vec<(f64, ParamVec)> = batch
        .par_iter()
        .map(|s| {
            let rec = sr_record(params, cfg, s)?;
            Ok((rec.value(), rec.grad(params, 1.0 / n)))
        })
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_scaled(1.0, g);
    }
    Ok((loss / n, total))
}

pub fn sr_loss(params: &ModelParams, cfg: &SrConfig, batch: &[SrSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|s| sr_record(params, cfg, s).map(|r| r.value()))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Trains the SR model on clips already at SR resolution.
pub fn sr_train(
    params: &ModelParams,
    cfg: &SrConfig,
    vae: &ToyVae,
    dataset: &[TrainingClip],
    tcfg: &TrainConfig,
    scfg: &SrTrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut params = params.clone();
    let mut opt = Optimizer::new(tcfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut losses = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let batch = (0..tcfg.batch_size.max(1))
            .map(|_| draw_sr_sample(cfg, dataset, vae, &tcfg.sampler, scfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grad) = sr_grad(&params, cfg, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        opt.step_scaled(&mut params, &mut grad, tcfg.lr_scale(step));
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("sr step {step}: loss {loss:.5}");
        }
    }
    Ok(TrainOutcome { params, losses })
}
