//! Timelines of image/clip conditions and their latent-space layout.
//!
//! A [`Timeline`] places conditions at pixel-frame anchors. [`build_layout`]
//! turns it into a condition tensor plus a per-frame occupancy mask aligned
//! with the noise latent:
//!
//! * an image is re-encoded on its own and lands on the latent frame of its
//!   anchor;
//! * a clip's first frame is re-encoded on its own, and every later latent
//!   frame it touches is a fresh posterior draw of that chunk's frames;
//! * a tail condition (carried over from a previous segment) already holds
//!   latent frames and is copied verbatim.

use ndarray::{s, Array1, Array3, Array4, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_geometry::TemporalCompression;
use crate::toy_vae::{LatentVideo, PixelVideo, ToyVae, LATENT_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Image,
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    User,
    /// Latent frames carried over from the previous generated segment.
    Tail,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConditionPayload {
    Pixels(PixelVideo),
    /// `[K, H_lat, W_lat, C]` latent frames used as-is.
    Latent(Array4<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    pub anchor_frame: usize,
    pub payload: ConditionPayload,
    pub source: ConditionSource,
}

impl ConditionSpec {
    pub fn image(anchor_frame: usize, image: Array3<f64>) -> Result<Self> {
        Ok(Self {
            kind: ConditionKind::Image,
            anchor_frame,
            payload: ConditionPayload::Pixels(PixelVideo::from_image(image)?),
            source: ConditionSource::User,
        })
    }

    pub fn clip(anchor_frame: usize, clip: PixelVideo) -> Self {
        Self {
            kind: ConditionKind::Clip,
            anchor_frame,
            payload: ConditionPayload::Pixels(clip),
            source: ConditionSource::User,
        }
    }

    /// Tail condition holding latent frames; anchored at latent frame 0.
    pub fn tail(latents: Array4<f64>) -> Self {
        Self {
            kind: ConditionKind::Clip,
            anchor_frame: 0,
            payload: ConditionPayload::Latent(latents),
            source: ConditionSource::Tail,
        }
    }

    /// Number of latent frames the condition occupies, starting at its anchor's
    /// latent frame.
    pub fn latent_extent(&self, tc: &TemporalCompression) -> Result<(usize, usize)> {
        let first = tc.frame_to_latent(self.anchor_frame)?;
        let last = match (&self.payload, self.kind) {
            (ConditionPayload::Latent(z), _) => first + z.dim().0 - 1,
            (ConditionPayload::Pixels(_), ConditionKind::Image) => first,
            (ConditionPayload::Pixels(v), ConditionKind::Clip) => {
                let end = self.anchor_frame + v.len() - 1;
                if end >= tc.pixel_len() {
                    return Err(Error::Range {
                        what: "clip end frame",
                        index: end,
                        len: tc.pixel_len(),
                    });
                }
                tc.frame_to_latent(end)?
            }
        };
        if last >= tc.latent_len() {
            return Err(Error::Range {
                what: "condition latent frame",
                index: last,
                len: tc.latent_len(),
            });
        }
        Ok((first, last))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub total_frames: usize,
    pub prompt_id: usize,
    pub conditions: Vec<ConditionSpec>,
}

/// Record of an anchor moved onto a chunk start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapNotice {
    pub condition: usize,
    pub requested: usize,
    pub snapped: usize,
}

impl Timeline {
    pub fn new(total_frames: usize, prompt_id: usize) -> Self {
        Self {
            total_frames,
            prompt_id,
            conditions: Vec::new(),
        }
    }

    pub fn with(mut self, c: ConditionSpec) -> Self {
        self.conditions.push(c);
        self
    }

    /// Snaps anchors onto chunk starts and sorts conditions by anchor.
    pub fn snap(&mut self, tc: &TemporalCompression) -> Result<Vec<SnapNotice>> {
        let mut notices = Vec::new();
        for (i, c) in self.conditions.iter_mut().enumerate() {
            let (snapped, moved) = tc.snap_anchor(c.anchor_frame)?;
            if moved {
                log::info!(
                    "condition {i}: anchor frame {} snapped to chunk start {snapped}",
                    c.anchor_frame
                );
                notices.push(SnapNotice {
                    condition: i,
                    requested: c.anchor_frame,
                    snapped,
                });
                c.anchor_frame = snapped;
            }
        }
        self.conditions.sort_by_key(|c| c.anchor_frame);
        Ok(notices)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeAnchor {
    pub latent_t: usize,
    pub kind: ConditionKind,
}

/// Channel-wise condition input for a noise latent of the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionLayout {
    /// `[T_lat, H_lat, W_lat, C]`, zero on unoccupied frames.
    pub cond: Array4<f64>,
    /// 1.0 where a latent frame is occupied by a condition.
    pub mask: Array1<f64>,
    pub rope_anchors: Vec<RopeAnchor>,
}

impl ConditionLayout {
    pub fn empty(frames: usize, h: usize, w: usize) -> Self {
        Self {
            cond: Array4::zeros((frames, h, w, LATENT_CHANNELS)),
            mask: Array1::zeros(frames),
            rope_anchors: Vec::new(),
        }
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        let (t, h, w, _) = self.cond.dim();
        (t, h, w)
    }

    pub fn occupied(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&k| self.mask[k] > 0.5).collect()
    }
}

/// Patch means averaged over all frames of `frames`.
fn chunk_mean(vae: &ToyVae, frames: &PixelVideo) -> Result<Array3<f64>> {
    let mut acc: Option<Array3<f64>> = None;
    for f in 0..frames.len() {
        let z = vae.encode_single(frames.frame(f))?;
        acc = Some(match acc {
            Some(a) => a + z,
            None => z,
        });
    }
    Ok(acc.expect("non-empty clip") / frames.len() as f64)
}

/// Builds the condition tensor for `timeline` on a latent grid of
/// `h_lat × w_lat`. Anchors are snapped to chunk starts first.
pub fn build_layout<R: Rng + ?Sized>(
    timeline: &Timeline,
    vae: &ToyVae,
    grid_hw: (usize, usize),
    rng: &mut R,
) -> Result<ConditionLayout> {
    let tc = vae.compression(timeline.total_frames)?;
    let mut tl = timeline.clone();
    tl.snap(&tc)?;
    let (h, w) = grid_hw;
    let mut layout = ConditionLayout::empty(tc.latent_len(), h, w);
    let mut owner: Vec<Option<usize>> = vec![None; tc.latent_len()];

    for (ci, c) in tl.conditions.iter().enumerate() {
        let (first, last) = c.latent_extent(&tc)?;
        for k in first..=last {
            if let Some(other) = owner[k] {
                return Err(Error::LayoutConflict {
                    segment: None,
                    details: format!(
                        "conditions {other} (anchor {}) and {ci} (anchor {}) both occupy latent frame {k}",
                        tl.conditions[other].anchor_frame, c.anchor_frame
                    ),
                });
            }
            owner[k] = Some(ci);
        }
        match &c.payload {
            ConditionPayload::Latent(z) => {
                if z.dim().1 != h || z.dim().2 != w || z.dim().3 != LATENT_CHANNELS {
                    return Err(Error::Shape(format!(
                        "tail latent {:?} does not match grid {h}x{w}",
                        z.dim()
                    )));
                }
                layout.cond.slice_mut(s![first..=last, .., .., ..]).assign(z);
            }
            ConditionPayload::Pixels(v) => {
                let head = vae.encode_single(v.frame(0))?;
                check_cell_grid(&head, h, w)?;
                layout.cond.index_axis_mut(Axis(0), first).assign(&head);
                for k in first + 1..=last {
                    let (a, b) = tc.latent_to_frame_span(k)?;
                    let lo = a.max(c.anchor_frame) - c.anchor_frame;
                    let hi = b.min(c.anchor_frame + v.len() - 1) - c.anchor_frame;
                    let mean = chunk_mean(vae, &v.sub_clip(lo, hi - lo + 1)?)?;
                    let draw = mean.mapv(|m| {
                        let n: f64 = StandardNormal.sample(rng);
                        m + vae.posterior_std * n
                    });
                    layout.cond.index_axis_mut(Axis(0), k).assign(&draw);
                }
            }
        }
        for k in first..=last {
            layout.mask[k] = 1.0;
        }
        layout.rope_anchors.push(RopeAnchor {
            latent_t: first,
            kind: c.kind,
        });
    }
    Ok(layout)
}

fn check_cell_grid(z: &Array3<f64>, h: usize, w: usize) -> Result<()> {
    if z.dim().0 != h || z.dim().1 != w {
        return Err(Error::Shape(format!(
            "condition encodes to {}x{} cells, latent grid is {h}x{w}",
            z.dim().0,
            z.dim().1
        )));
    }
    Ok(())
}

/// Ground-truth action interval in pixel frames (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionInterval {
    pub start: usize,
    pub end: usize,
}

/// Mixing weights of the training-time condition sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionSamplerConfig {
    pub boundary_weight: f64,
    pub random_frame_weight: f64,
    pub clip_weight: f64,
    /// Upper bound on condition draws per sample.
    pub max_draws: usize,
    /// Longest clip segment, in latent frames.
    pub max_clip_latents: usize,
}

impl Default for ConditionSamplerConfig {
    fn default() -> Self {
        Self {
            boundary_weight: 0.5,
            random_frame_weight: 0.3,
            clip_weight: 0.2,
            max_draws: 3,
            max_clip_latents: 3,
        }
    }
}

/// One training video with its precomputed latent and annotations.
#[derive(Debug, Clone)]
pub struct TrainingClip {
    pub video: PixelVideo,
    pub latent: LatentVideo,
    pub actions: Vec<ActionInterval>,
    pub prompt_id: usize,
}

#[derive(Clone, Copy)]
enum Draw {
    Boundary,
    RandomFrame,
    Clip,
}

/// Draws a randomized condition set for one training sample: action boundary
/// frames, random intermediate frames and latent-aligned clip segments.
pub fn sample_training_conditions<R: Rng + ?Sized>(
    clip: &TrainingClip,
    cfg: &ConditionSamplerConfig,
    rng: &mut R,
) -> Result<Timeline> {
    let t = clip.video.len();
    if t == 0 {
        return Err(Error::Invalid("empty training video".into()));
    }
    if clip.actions.is_empty() {
        return Err(Error::Invalid("training clip has no action intervals".into()));
    }
    let weights = [cfg.boundary_weight, cfg.random_frame_weight, cfg.clip_weight];
    if weights.iter().any(|w| *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(
            "condition sampler weights must be non-negative with a positive sum".into(),
        ));
    }
    let tc = clip.latent.tc;
    let n_lat = tc.latent_len();
    let floor_anchor = |f: usize| tc.chunk_start(tc.frame_to_latent(f.min(t - 1)).unwrap_or(0));

    let mut occupied = vec![false; n_lat];
    let mut out = Timeline::new(t, clip.prompt_id);
    let draws = rng.random_range(1..=cfg.max_draws.max(1));
    let total: f64 = weights.iter().sum();

    for _ in 0..draws {
        let u = rng.random::<f64>() * total;
        let mode = if u < weights[0] {
            Draw::Boundary
        } else if u < weights[0] + weights[1] {
            Draw::RandomFrame
        } else {
            Draw::Clip
        };
        let mut new: Vec<(usize, usize, ConditionSpec)> = Vec::new();
        match mode {
            Draw::Boundary => {
                let act = clip.actions.choose(rng).expect("non-empty actions");
                for f in [act.start, act.end] {
                    let a = floor_anchor(f);
                    let k = tc.frame_to_latent(a)?;
                    if new.iter().all(|(k0, _, _)| *k0 != k) {
                        new.push((k, k, ConditionSpec::image(a, clip.video.frame(a).to_owned())?));
                    }
                }
            }
            Draw::RandomFrame => {
                let k = rng.random_range(0..n_lat);
                let a = tc.chunk_start(k);
                new.push((k, k, ConditionSpec::image(a, clip.video.frame(a).to_owned())?));
            }
            Draw::Clip => {
                if n_lat < 2 {
                    continue;
                }
                let k0 = rng.random_range(0..n_lat - 1);
                let max_len = cfg.max_clip_latents.max(2).min(n_lat - k0);
                let len = rng.random_range(2..=max_len);
                let k1 = k0 + len - 1;
                let a = tc.chunk_start(k0);
                let (_, end) = tc.latent_to_frame_span(k1)?;
                new.push((k0, k1, ConditionSpec::clip(a, clip.video.sub_clip(a, end - a + 1)?)));
            }
        }
        for (k0, k1, spec) in new {
            if (k0..=k1).any(|k| occupied[k]) {
                continue;
            }
            for o in &mut occupied[k0..=k1] {
                *o = true;
            }
            out.conditions.push(spec);
        }
    }
    if out.conditions.is_empty() {
        // Every draw collided or was a clip on a one-frame latent.
        out.conditions
            .push(ConditionSpec::image(0, clip.video.frame(0).to_owned())?);
    }
    out.conditions.sort_by_key(|c| c.anchor_frame);
    Ok(out)
}
