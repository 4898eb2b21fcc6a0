//! Model-free video scorers used by the data filter.

use ndarray::{ArrayView3, Zip};

use crate::error::{Error, Result};
use crate::toy_vae::PixelVideo;

pub const HIST_BINS: usize = 16;
pub const HIST_CELLS: usize = 4;

fn need_two(v: &PixelVideo, what: &str) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::Invalid(format!(
            "{what} needs at least 2 frames, got {}",
            v.len()
        )));
    }
    Ok(())
}

/// Per-cell, per-channel intensity histograms over a `HIST_CELLS`² grid,
/// each normalized to unit mass.
pub fn frame_features(frame: ArrayView3<'_, f64>) -> Vec<f64> {
    let (h, w, c) = frame.dim();
    let mut feat = vec![0.0; HIST_CELLS * HIST_CELLS * c * HIST_BINS];
    let mut counts = [0usize; HIST_CELLS * HIST_CELLS];
    for y in 0..h {
        let cy = (y * HIST_CELLS / h).min(HIST_CELLS - 1);
        for x in 0..w {
            let cx = (x * HIST_CELLS / w).min(HIST_CELLS - 1);
            let cell = cy * HIST_CELLS + cx;
            counts[cell] += 1;
            for ch in 0..c {
                let v = frame[[y, x, ch]].clamp(0.0, 1.0);
                let bin = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                feat[(cell * c + ch) * HIST_BINS + bin] += 1.0;
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 0 {
            for f in &mut feat[cell * c * HIST_BINS..(cell + 1) * c * HIST_BINS] {
                *f /= n as f64;
            }
        }
    }
    feat
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of the first and last frame's histogram features.
pub fn first_last_similarity(v: &PixelVideo) -> Result<f64> {
    need_two(v, "first/last similarity")?;
    Ok(cosine(
        &frame_features(v.frame(0)),
        &frame_features(v.frame(v.len() - 1)),
    ))
}

fn adjacent<F: Fn(f64) -> f64>(v: &PixelVideo, f: usize, g: F) -> f64 {
    let n = v.frame(f).len() as f64;
    Zip::from(v.frame(f))
        .and(v.frame(f + 1))
        .fold(0.0, |acc, &a, &b| acc + g(b - a))
        / n
}

/// Mean absolute difference between adjacent frames.
pub fn motion_strength(v: &PixelVideo) -> Result<f64> {
    need_two(v, "motion strength")?;
    let total: f64 = (0..v.len() - 1).map(|f| adjacent(v, f, f64::abs)).sum();
    Ok(total / (v.len() - 1) as f64)
}

/// Mean squared difference for each adjacent frame pair.
pub fn adjacent_msd(v: &PixelVideo) -> Vec<f64> {
    (0..v.len().saturating_sub(1))
        .map(|f| adjacent(v, f, |d| d * d))
        .collect()
}

/// Number of adjacent frame pairs whose mean squared difference exceeds `jump`.
pub fn cut_count(v: &PixelVideo, jump: f64) -> usize {
    adjacent_msd(v).into_iter().filter(|&d| d > jump).count()
}

/// Pluggable per-video quality scorer. A video passes when its score is at
/// least `min_score()`.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, v: &PixelVideo) -> f64;
    fn min_score(&self) -> f64;
}

/// Stand-in for a learned aesthetic model: global pixel standard deviation.
#[derive(Debug, Clone, Copy)]
pub struct AestheticStub {
    pub min: f64,
}

impl Default for AestheticStub {
    fn default() -> Self {
        Self { min: 0.0 }
    }
}

impl Scorer for AestheticStub {
    fn name(&self) -> &str {
        "aesthetic"
    }

    fn score(&self, v: &PixelVideo) -> f64 {
        v.frames().std(0.0)
    }

    fn min_score(&self) -> f64 {
        self.min
    }
}

/// Shape centroid per frame, weighting each pixel by its colour distance to
/// the frame's border-mean colour.
pub fn estimate_centroids(v: &PixelVideo) -> Vec<[f64; 2]> {
    let (h, w) = (v.height(), v.width());
    (0..v.len())
        .map(|f| {
            let frame = v.frame(f);
            let mut border = [0.0; 3];
            let mut nb = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                        for c in 0..3 {
                            border[c] += frame[[y, x, c]];
                        }
                        nb += 1.0;
                    }
                }
            }
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let d: f64 = (0..3)
                        .map(|c| (frame[[y, x, c]] - border[c] / nb).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    sx += d * (x as f64 + 0.5);
                    sy += d * (y as f64 + 0.5);
                    sw += d;
                }
            }
            if sw == 0.0 {
                [w as f64 / 2.0, h as f64 / 2.0]
            } else {
                [sx / sw, sy / sw]
            }
        })
        .collect()
}

/// Largest centroid displacement between adjacent frames.
pub fn max_centroid_step(centroids: &[[f64; 2]]) -> f64 {
    centroids
        .windows(2)
        .map(|p| ((p[1][0] - p[0][0]).powi(2) + (p[1][1] - p[0][1]).powi(2)).sqrt())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array4};
    use proptest::prelude::*;

    fn video(frames: Array4<f64>) -> PixelVideo {
        PixelVideo::new(frames, 8.0).unwrap()
    }

    fn ramp(t: usize) -> PixelVideo {
        video(Array4::from_shape_fn((t, 8, 8, 3), |(f, y, x, c)| {
            ((f * 3 + y + 2 * x + c) % 13) as f64 / 12.0
        }))
    }

    #[test]
    fn identical_endpoints_score_one() {
        let mut v = ramp(5).into_frames();
        let first = v.slice(s![0, .., .., ..]).to_owned();
        v.slice_mut(s![4, .., .., ..]).assign(&first);
        assert!((first_last_similarity(&video(v)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn black_to_white_is_orthogonal() {
        let mut v = Array4::zeros((3, 8, 8, 3));
        v.slice_mut(s![2, .., .., ..]).fill(1.0);
        assert_eq!(first_last_similarity(&video(v)).unwrap(), 0.0);
    }

    #[test]
    fn short_videos_rejected() {
        let v = ramp(1);
        assert!(first_last_similarity(&v).is_err());
        assert!(motion_strength(&v).is_err());
    }

    #[test]
    fn static_video_has_zero_motion() {
        let one = ramp(1).into_frames();
        let v = Array4::from_shape_fn((4, 8, 8, 3), |(_, y, x, c)| one[[0, y, x, c]]);
        let v = video(v);
        assert_eq!(motion_strength(&v).unwrap(), 0.0);
        assert_eq!(cut_count(&v, 0.0), 0);
    }

    #[test]
    fn unit_jump_counts_as_cut() {
        let mut v = Array4::zeros((4, 4, 4, 3));
        v.slice_mut(s![2.., .., .., ..]).fill(1.0);
        let v = video(v);
        assert_eq!(adjacent_msd(&v), vec![0.0, 1.0, 0.0]);
        assert_eq!(cut_count(&v, 0.5), 1);
    }

    #[test]
    fn centroid_of_single_bright_square() {
        let mut v = Array4::zeros((1, 16, 16, 3));
        v.slice_mut(s![0, 4..8, 10..14, ..]).fill(1.0);
        let c = estimate_centroids(&video(v));
        assert!((c[0][0] - 12.0).abs() < 1e-12 && (c[0][1] - 6.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn middle_frames_do_not_affect_similarity(seed in 0u64..1000, t in 3usize..7) {
            let v = ramp(t).into_frames();
            let mut w = v.clone();
            for f in 1..t - 1 {
                let src = 1 + (f + seed as usize) % (t - 2);
                w.slice_mut(s![f, .., .., ..]).assign(&v.slice(s![src, .., .., ..]));
            }
            prop_assert_eq!(
                first_last_similarity(&video(v)).unwrap(),
                first_last_similarity(&video(w)).unwrap()
            );
        }

        #[test]
        fn motion_is_linear_in_contrast(a in 0.05f64..1.0) {
            let v = ramp(4);
            let scaled = video(v.frames().mapv(|x| x * a));
            let base = motion_strength(&v).unwrap();
            prop_assert!((motion_strength(&scaled).unwrap() - a * base).abs() < 1e-12);
        }
    }
}
