//! Analytic causal video autoencoder.
//!
//! Encoding averages each `p×p` spatial patch over every pixel frame of a
//! latent chunk, so latent channels are per-patch RGB means. The posterior is
//! an isotropic Gaussian around that mean with one shared standard deviation.
//! Decoding replicates each latent cell back over its patch and chunk.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_geometry::TemporalCompression;

pub const LATENT_CHANNELS: usize = 3;
pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_POSTERIOR_STD: f64 = 0.05;

const RANGE_SLACK: f64 = 1e-6;

/// RGB frames in `[0, 1]`, laid out `[T, H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    frames: Array4<f64>,
    pub fps: f64,
}

impl PixelVideo {
    pub fn new(frames: Array4<f64>, fps: f64) -> Result<Self> {
        let (t, _, _, c) = frames.dim();
        if t == 0 {
            return Err(Error::Shape("video has no frames".into()));
        }
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 colour channels, got {c}")));
        }
        if let Some(v) = frames.iter().find(|v| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { frames, fps })
    }

    /// Wraps a single `[H, W, 3]` image as a one-frame video.
    pub fn from_image(image: Array3<f64>) -> Result<Self> {
        Self::new(image.insert_axis(Axis(0)), 1.0)
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f64> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn frame(&self, f: usize) -> ArrayView3<'_, f64> {
        self.frames.index_axis(Axis(0), f)
    }

    /// Frames `start..start + len` as a new video.
    pub fn sub_clip(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Range {
                what: "clip end frame",
                index: start + len,
                len: self.len(),
            });
        }
        Ok(Self {
            frames: self.frames.slice(s![start..start + len, .., .., ..]).to_owned(),
            fps: self.fps,
        })
    }
}

/// `[T_lat, H/p, W/p, C]` latent tensor with the compression it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub data: Array4<f64>,
    pub tc: TemporalCompression,
    pub patch: usize,
}

impl LatentVideo {
    pub fn new(data: Array4<f64>, tc: TemporalCompression, patch: usize) -> Result<Self> {
        if data.dim().0 != tc.latent_len() {
            return Err(Error::Shape(format!(
                "latent has {} frames but compression implies {}",
                data.dim().0,
                tc.latent_len()
            )));
        }
        Ok(Self { data, tc, patch })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        let (t, h, w, _) = self.data.dim();
        (t, h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mean: LatentVideo,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyVae {
    pub patch: usize,
    pub stride: usize,
    pub posterior_std: f64,
}

impl Default for ToyVae {
    fn default() -> Self {
        Self {
            patch: DEFAULT_PATCH,
            stride: crate::latent_geometry::DEFAULT_STRIDE,
            posterior_std: DEFAULT_POSTERIOR_STD,
        }
    }
}

impl ToyVae {
    pub fn new(patch: usize, stride: usize, posterior_std: f64) -> Result<Self> {
        if patch == 0 || stride == 0 {
            return Err(Error::Config("patch and stride must be positive".into()));
        }
        if !(posterior_std > 0.0 && posterior_std.is_finite()) {
            return Err(Error::Config(format!("posterior std {posterior_std} must be positive")));
        }
        Ok(Self {
            patch,
            stride,
            posterior_std,
        })
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(self.patch) || !w.is_multiple_of(self.patch) {
            return Err(Error::Shape(format!(
                "{h}x{w} frame is not divisible by patch size {}",
                self.patch
            )));
        }
        Ok(())
    }

    pub fn compression(&self, pixel_len: usize) -> Result<TemporalCompression> {
        TemporalCompression::new(self.stride, pixel_len)
    }

    pub fn encode(&self, video: &PixelVideo) -> Result<LatentPosterior> {
        let (t, h, w, _) = video.frames.dim();
        self.check_spatial(h, w)?;
        let tc = self.compression(t)?;
        let p = self.patch;
        let mut mean = Array4::zeros((tc.latent_len(), h / p, w / p, LATENT_CHANNELS));
        for k in 0..tc.latent_len() {
            let (a, b) = tc.latent_to_frame_span(k)?;
            let chunk = video.frames.slice(s![a..=b, .., .., ..]);
            let norm = ((b - a + 1) * p * p) as f64;
            for i in 0..h / p {
                for j in 0..w / p {
                    let cell = chunk.slice(s![.., i * p..(i + 1) * p, j * p..(j + 1) * p, ..]);
                    for c in 0..LATENT_CHANNELS {
                        mean[[k, i, j, c]] = cell.index_axis(Axis(3), c).sum() / norm;
                    }
                }
            }
        }
        Ok(LatentPosterior {
            mean: LatentVideo::new(mean, tc, p)?,
            std: self.posterior_std,
        })
    }

    /// Encodes one image as if it were a one-frame video.
    pub fn encode_single(&self, image: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 colour channels, got {c}")));
        }
        self.check_spatial(h, w)?;
        let p = self.patch;
        let mut out = Array3::zeros((h / p, w / p, LATENT_CHANNELS));
        let norm = (p * p) as f64;
        for i in 0..h / p {
            for j in 0..w / p {
                let cell = image.slice(s![i * p..(i + 1) * p, j * p..(j + 1) * p, ..]);
                for ch in 0..LATENT_CHANNELS {
                    out[[i, j, ch]] = cell.index_axis(Axis(2), ch).sum() / norm;
                }
            }
        }
        Ok(out)
    }

    /// Reparameterized draw `mean + std · noise`.
    pub fn sample(&self, post: &LatentPosterior, noise: &Array4<f64>) -> Result<LatentVideo> {
        if noise.dim() != post.mean.data.dim() {
            return Err(Error::Shape(format!(
                "noise {:?} vs posterior mean {:?}",
                noise.dim(),
                post.mean.data.dim()
            )));
        }
        let data = &post.mean.data + &(noise * post.std);
        LatentVideo::new(data, post.mean.tc, post.mean.patch)
    }

    pub fn decode(&self, z: &LatentVideo, pixel_len: usize) -> Result<PixelVideo> {
        let tc = self.compression(pixel_len)?;
        if tc.latent_len() != z.frames() {
            return Err(Error::Shape(format!(
                "{} latent frames cannot decode to {pixel_len} pixel frames at stride {}",
                z.frames(),
                self.stride
            )));
        }
        let (_, lh, lw, c) = z.data.dim();
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!("latent has {c} channels")));
        }
        let p = z.patch;
        let mut frames = Array4::zeros((pixel_len, lh * p, lw * p, 3));
        for f in 0..pixel_len {
            let k = tc.frame_to_latent(f)?;
            for y in 0..lh * p {
                for x in 0..lw * p {
                    for ch in 0..3 {
                        frames[[f, y, x, ch]] = z.data[[k, y / p, x / p, ch]].clamp(0.0, 1.0);
                    }
                }
            }
        }
        PixelVideo::new(frames, 1.0)
    }
}
