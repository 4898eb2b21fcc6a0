//! Index arithmetic for causal temporal compression.
//!
//! A causal video autoencoder keeps pixel frame 0 as its own latent chunk and
//! groups every following run of `stride` frames into one latent frame:
//!
//! ```text
//! pixel:  0 | 1 2 3 4 | 5 6 7 8 | 9 ...
//! latent: 0 |    1    |    2    |  3 ...
//! ```
//!
//! A condition can only be pinned to a latent frame cleanly when its pixel
//! timestamp starts a chunk, so user anchors are snapped onto chunk starts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalCompression {
    stride: usize,
    pixel_len: usize,
}

/// Number of latent frames produced for `pixel_len` frames.
pub fn latent_len(pixel_len: usize, stride: usize) -> usize {
    assert!(pixel_len >= 1 && stride >= 1);
    1 + (pixel_len - 1).div_ceil(stride)
}

/// Smallest pixel length whose encoding has exactly `latent_len` frames.
pub fn pixel_len_for(latent_len: usize, stride: usize) -> usize {
    assert!(latent_len >= 1);
    1 + (latent_len - 1) * stride
}

impl TemporalCompression {
    pub fn new(stride: usize, pixel_len: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("temporal stride must be positive".into()));
        }
        if pixel_len == 0 {
            return Err(Error::Config("video must have at least one frame".into()));
        }
        Ok(Self { stride, pixel_len })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pixel_len(&self) -> usize {
        self.pixel_len
    }

    pub fn latent_len(&self) -> usize {
        latent_len(self.pixel_len, self.stride)
    }

    /// Latent chunk containing pixel frame `frame`.
    pub fn frame_to_latent(&self, frame: usize) -> Result<usize> {
        if frame >= self.pixel_len {
            return Err(Error::Range {
                what: "pixel frame",
                index: frame,
                len: self.pixel_len,
            });
        }
        Ok(frame.div_ceil(self.stride))
    }

    /// Inclusive pixel-frame span covered by latent frame `k`.
    pub fn latent_to_frame_span(&self, k: usize) -> Result<(usize, usize)> {
        let n = self.latent_len();
        if k >= n {
            return Err(Error::Range {
                what: "latent frame",
                index: k,
                len: n,
            });
        }
        if k == 0 {
            return Ok((0, 0));
        }
        let start = (k - 1) * self.stride + 1;
        let end = (k * self.stride).min(self.pixel_len - 1);
        Ok((start, end))
    }

    /// First pixel frame of latent chunk `k` (not range checked).
    pub fn chunk_start(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            (k - 1) * self.stride + 1
        }
    }

    pub fn is_valid_anchor(&self, frame: usize) -> bool {
        frame == 0 || (frame - 1).is_multiple_of(self.stride)
    }

    /// Snaps `frame` to the nearest chunk start, preferring the earlier one on
    /// ties. Returns the anchor and whether it moved.
    pub fn snap_anchor(&self, frame: usize) -> Result<(usize, bool)> {
        if frame >= self.pixel_len {
            return Err(Error::Range {
                what: "pixel frame",
                index: frame,
                len: self.pixel_len,
            });
        }
        if self.is_valid_anchor(frame) {
            return Ok((frame, false));
        }
        // frame >= 2 here, so the chunk containing it starts at a k >= 1 anchor.
        let k = frame.div_ceil(self.stride);
        let below = self.chunk_start(k);
        let above = self.chunk_start(k + 1);
        let snapped = if above >= self.pixel_len || frame - below <= above - frame {
            below
        } else {
            above
        };
        Ok((snapped, true))
    }

    /// Anchor of the last chunk, i.e. the latest valid anchor in the video.
    pub fn last_anchor(&self) -> usize {
        self.chunk_start(self.latent_len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Enumerates chunk membership directly from the stride rule.
    fn chunk_table(pixel_len: usize, stride: usize) -> Vec<usize> {
        let mut out = vec![0];
        let mut chunk = 1;
        let mut filled = 0;
        for _ in 1..pixel_len {
            out.push(chunk);
            filled += 1;
            if filled == stride {
                chunk += 1;
                filled = 0;
            }
        }
        out
    }

    #[test]
    fn frame_to_latent_examples() {
        let tc = TemporalCompression::new(4, 17).unwrap();
        let table = chunk_table(17, 4);
        assert_eq!(tc.frame_to_latent(0).unwrap(), 0);
        assert_eq!(tc.frame_to_latent(7).unwrap(), table[7]);
        assert_eq!(table[7], 2);
        assert_eq!(tc.frame_to_latent(4).unwrap(), 1);
        assert!(matches!(tc.frame_to_latent(17), Err(Error::Range { .. })));
    }

    #[test]
    fn span_examples() {
        let tc = TemporalCompression::new(4, 17).unwrap();
        assert_eq!(tc.latent_to_frame_span(0).unwrap(), (0, 0));
        assert_eq!(tc.latent_to_frame_span(2).unwrap(), (5, 8));
        let short = TemporalCompression::new(4, 15).unwrap();
        assert_eq!(short.latent_to_frame_span(4).unwrap(), (13, 14));
        assert!(short.latent_to_frame_span(5).is_err());
    }

    #[test]
    fn snap_examples() {
        let tc = TemporalCompression::new(4, 17).unwrap();
        assert_eq!(tc.snap_anchor(5).unwrap(), (5, false));
        assert_eq!(tc.snap_anchor(0).unwrap(), (0, false));
        assert_eq!(tc.snap_anchor(6).unwrap(), (5, true));
        // 7 is equidistant from 5 and 9.
        assert_eq!(tc.snap_anchor(7).unwrap(), (5, true));
        assert_eq!(tc.snap_anchor(8).unwrap(), (9, true));
        // No anchor above the last chunk start.
        assert_eq!(tc.snap_anchor(16).unwrap(), (13, true));
    }

    #[test]
    fn latent_len_formula() {
        assert_eq!(latent_len(1, 4), 1);
        assert_eq!(latent_len(9, 4), 3);
        assert_eq!(latent_len(17, 4), 5);
        assert_eq!(latent_len(18, 4), 6);
        assert_eq!(pixel_len_for(5, 4), 17);
    }

    #[test]
    fn exhaustive_against_enumeration() {
        for stride in [1usize, 2, 3, 4, 8] {
            for t in 1..=64 {
                let tc = TemporalCompression::new(stride, t).unwrap();
                let table = chunk_table(t, stride);
                assert_eq!(tc.latent_len(), table[t - 1] + 1);
                for (f, &k) in table.iter().enumerate() {
                    assert_eq!(tc.frame_to_latent(f).unwrap(), k);
                    let (a, b) = tc.latent_to_frame_span(k).unwrap();
                    assert!(a <= f && f <= b);
                    let (s, _) = tc.snap_anchor(f).unwrap();
                    assert_eq!(tc.snap_anchor(s).unwrap(), (s, false));
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn spans_partition_frames(stride in 1usize..9, pixel_len in 1usize..200) {
            let tc = TemporalCompression::new(stride, pixel_len).unwrap();
            let mut next = 0;
            for k in 0..tc.latent_len() {
                let (a, b) = tc.latent_to_frame_span(k).unwrap();
                proptest::prop_assert_eq!(a, next);
                proptest::prop_assert!(b - a < stride.max(1) || k == 0);
                for f in a..=b {
                    proptest::prop_assert_eq!(tc.frame_to_latent(f).unwrap(), k);
                }
                next = b + 1;
            }
            proptest::prop_assert_eq!(next, pixel_len);
        }

        #[test]
        fn snapping_is_idempotent(stride in 1usize..9, pixel_len in 1usize..200, frac in 0.0f64..1.0) {
            let tc = TemporalCompression::new(stride, pixel_len).unwrap();
            let f = ((pixel_len - 1) as f64 * frac) as usize;
            let (s, _) = tc.snap_anchor(f).unwrap();
            proptest::prop_assert!(tc.is_valid_anchor(s));
            proptest::prop_assert_eq!(tc.snap_anchor(s).unwrap(), (s, false));
        }
    }
}
