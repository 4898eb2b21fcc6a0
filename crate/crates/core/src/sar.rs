//! Segment-wise auto-regressive generation of timelines longer than the
//! model's latent window.
//!
//! The latent timeline is cut into overlapping segments that end on condition
//! boundaries where possible. Each segment after the first is conditioned on
//! the last `K` latent frames of its predecessor, and the overlaps are fused.

use ndarray::{s, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{build_layout, ConditionKind, ConditionLayout, ConditionSource, ConditionSpec, Timeline};
use crate::dit::{generate, DitConfig, ModelParams, SamplerOptions};
use crate::error::{Error, Result};
use crate::latent_geometry::{pixel_len_for, TemporalCompression};
use crate::seeding::derive;
use crate::toy_vae::ToyVae;

/// Inclusive latent range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn frames(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, first: usize, last: usize) -> bool {
        self.start <= first && last <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub latent_len: usize,
    pub max_len: usize,
    pub tail: usize,
    pub segments: Vec<Segment>,
    /// Indices of the user conditions routed to each segment.
    pub routes: Vec<Vec<usize>>,
}

fn check_window(max_len: usize, tail: usize) -> Result<()> {
    if max_len < 2 {
        return Err(Error::Config(format!(
            "maximum segment length must be at least 2, got {max_len}"
        )));
    }
    if tail == 0 || tail >= max_len {
        return Err(Error::Config(format!(
            "tail length must satisfy 1 <= K < L_max, got K={tail}, L_max={max_len}"
        )));
    }
    Ok(())
}

/// Greedy partition of `0..n` into segments of at most `max_len` latent
/// frames overlapping by `tail`. A segment starting at `a` ends at the latest
/// boundary `b` with `a + tail <= b <= a + max_len − 1`, or at the window end
/// when none qualifies; the last segment ends at `n − 1`.
pub fn plan_segments(n: usize, boundaries: &[usize], max_len: usize, tail: usize) -> Result<SegmentPlan> {
    check_window(max_len, tail)?;
    if n == 0 {
        return Err(Error::Config("latent length must be positive".into()));
    }
    if let Some(&b) = boundaries.iter().find(|&&b| b >= n) {
        return Err(Error::Range {
            what: "boundary latent index",
            index: b,
            len: n,
        });
    }
    let mut bounds = boundaries.to_vec();
    bounds.sort_unstable();
    bounds.dedup();
    let mut segments = Vec::new();
    let mut a = 0;
    loop {
        let e = a + max_len - 1;
        if e >= n - 1 {
            segments.push(Segment { start: a, end: n - 1 });
            break;
        }
        let end = bounds
            .iter()
            .rev()
            .find(|&&b| b >= a + tail && b <= e)
            .copied()
            .unwrap_or(e);
        segments.push(Segment { start: a, end });
        a = end + 1 - tail;
    }
    let routes = vec![Vec::new(); segments.len()];
    Ok(SegmentPlan {
        latent_len: n,
        max_len,
        tail,
        segments,
        routes,
    })
}

impl SegmentPlan {
    /// Routes each condition, given by its inclusive latent span, to every
    /// segment that contains the whole span.
    pub fn route(&mut self, spans: &[(usize, usize)]) {
        self.routes = self
            .segments
            .iter()
            .map(|seg| {
                spans
                    .iter()
                    .enumerate()
                    .filter(|(_, &(f, l))| seg.contains(f, l))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
    }
}

/// Last `k` latent frames of a generated segment as a tail condition.
pub fn extract_tail(segment: &Array4<f64>, k: usize) -> Result<ConditionSpec> {
    let len = segment.len_of(Axis(0));
    if k == 0 || k > len {
        return Err(Error::Range {
            what: "tail length",
            index: k,
            len,
        });
    }
    Ok(ConditionSpec::tail(segment.slice(s![len - k.., .., .., ..]).to_owned()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Linear ramp from the previous segment to the new one.
    Crossfade,
    /// Keep the previous segment's values.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarConfig {
    pub max_len: usize,
    pub tail: usize,
    pub fusion: Fusion,
    pub sampler_steps: usize,
}

impl SarConfig {
    pub fn for_model(cfg: &DitConfig) -> Self {
        Self {
            max_len: cfg.grid[0],
            tail: 2,
            fusion: Fusion::Crossfade,
            sampler_steps: cfg.sampler_steps,
        }
    }
}

/// Weight of the new segment at overlap position `j` of `k`.
pub fn crossfade_weight(j: usize, k: usize) -> f64 {
    (j + 1) as f64 / (k + 1) as f64
}

/// Result of a long generation. `segments` holds each segment's raw output
/// before fusion.
#[derive(Debug, Clone)]
pub struct LongGeneration {
    pub latent: Array4<f64>,
    pub plan: SegmentPlan,
    pub segments: Vec<Array4<f64>>,
}

fn layout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, u64::MAX))
}

/// One-window generation of a timeline; the building block of
/// [`generate_long`].
pub fn generate_single(
    params: &ModelParams,
    cfg: &DitConfig,
    tl: &Timeline,
    vae: &ToyVae,
    opts: SamplerOptions,
    seed: u64,
) -> Result<(Array4<f64>, ConditionLayout)> {
    let [_, h, w] = cfg.grid;
    let layout = build_layout(tl, vae, (h, w), &mut layout_rng(seed))?;
    let z = generate(params, cfg, &layout, &[tl.prompt_id], opts, seed)?;
    Ok((z, layout))
}

/// Candidate segment ends for the conditions: an image's latent index, and
/// for a clip the index just before it and its last index.
pub fn condition_boundaries(spans: &[(usize, usize)], kinds: &[ConditionKind]) -> Vec<usize> {
    let mut out = Vec::new();
    for (&(f, l), kind) in spans.iter().zip(kinds) {
        match kind {
            ConditionKind::Image => out.push(f),
            ConditionKind::Clip => {
                if f > 0 {
                    out.push(f - 1);
                }
                out.push(l);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Generates a timeline of any length segment by segment.
pub fn generate_long(
    params: &ModelParams,
    cfg: &DitConfig,
    tl: &Timeline,
    vae: &ToyVae,
    sar: &SarConfig,
    seed: u64,
) -> Result<LongGeneration> {
    check_window(sar.max_len, sar.tail)?;
    let opts = SamplerOptions::steps(sar.sampler_steps);
    let tc = vae.compression(tl.total_frames)?;
    let n = tc.latent_len();
    let mut tl = tl.clone();
    tl.snap(&tc)?;
    if tl.conditions.iter().any(|c| c.source == ConditionSource::Tail) {
        return Err(Error::Invalid("timeline already contains tail conditions".into()));
    }
    let spans: Vec<(usize, usize)> = tl
        .conditions
        .iter()
        .map(|c| c.latent_extent(&tc))
        .collect::<Result<_>>()?;
    let kinds: Vec<ConditionKind> = tl.conditions.iter().map(|c| c.kind).collect();
    let mut plan = plan_segments(n, &condition_boundaries(&spans, &kinds), sar.max_len, sar.tail)?;
    plan.route(&spans);
    for (i, &(f, l)) in spans.iter().enumerate() {
        if plan.routes.iter().all(|r| !r.contains(&i)) {
            return Err(Error::Config(format!(
                "condition {i} spans latent frames {f}..={l}, which no segment of at most {} frames contains",
                sar.max_len
            )));
        }
    }

    if plan.segments.len() == 1 {
        let (z, _) = generate_single(params, cfg, &tl, vae, opts, seed)?;
        return Ok(LongGeneration {
            latent: z.clone(),
            plan,
            segments: vec![z],
        });
    }

    let r = tc.stride();
    let [_, h, w] = cfg.grid;
    let mut out = Array4::zeros((n, h, w, cfg.latent_channels));
    let mut raw: Vec<Array4<f64>> = Vec::with_capacity(plan.segments.len());
    for (si, seg) in plan.segments.iter().enumerate() {
        let local_tc = TemporalCompression::new(r, pixel_len_for(seg.frames(), r))?;
        let mut local = Timeline::new(local_tc.pixel_len(), tl.prompt_id);
        if si > 0 {
            local.conditions.push(extract_tail(&raw[si - 1], sar.tail)?);
        }
        let prev = si.checked_sub(1).map(|p| plan.segments[p]);
        for &ci in &plan.routes[si] {
            let (f, l) = spans[ci];
            if prev.is_some_and(|p| p.contains(f, l)) {
                // Already honoured by the previous segment; the tail carries it.
                continue;
            }
            if si > 0 && f < seg.start + sar.tail {
                return Err(Error::LayoutConflict {
                    segment: Some(si),
                    details: format!(
                        "condition {ci} (latent {f}..={l}) overlaps the tail latents {}..={}",
                        seg.start,
                        seg.start + sar.tail - 1
                    ),
                });
            }
            let mut c = tl.conditions[ci].clone();
            c.anchor_frame = local_tc.chunk_start(f - seg.start);
            local.conditions.push(c);
        }
        let seg_seed = if si == 0 { seed } else { derive(seed, si as u64) };
        let (z, _) = generate_single(params, cfg, &local, vae, opts, seg_seed).map_err(|e| match e {
            Error::LayoutConflict { details, .. } => Error::LayoutConflict {
                segment: Some(si),
                details,
            },
            other => other,
        })?;
        let mut dst = out.slice_mut(s![seg.start..=seg.end, .., .., ..]);
        if si == 0 {
            dst.assign(&z);
        } else {
            let k = sar.tail;
            for j in 0..seg.frames() {
                let new = z.index_axis(Axis(0), j);
                if j < k {
                    let wn = match sar.fusion {
                        Fusion::Crossfade => crossfade_weight(j, k),
                        Fusion::Hard => 0.0,
                    };
                    let mut cell = dst.index_axis_mut(Axis(0), j);
                    cell.zip_mut_with(&new, |o, &v| *o = (1.0 - wn) * *o + wn * v);
                } else {
                    dst.index_axis_mut(Axis(0), j).assign(&new);
                }
            }
        }
        raw.push(z);
    }
    Ok(LongGeneration {
        latent: out,
        plan,
        segments: raw,
    })
}

/// Re-fuses the raw segments of a finished generation with another fusion
/// mode.
pub fn refuse(gen: &LongGeneration, fusion: Fusion) -> Array4<f64> {
    let mut out = gen.latent.clone();
    let k = gen.plan.tail;
    for (si, (seg, z)) in gen.plan.segments.iter().zip(&gen.segments).enumerate() {
        for j in 0..seg.frames() {
            let g = seg.start + j;
            let new = z.index_axis(Axis(0), j);
            if si == 0 || j >= k {
                out.index_axis_mut(Axis(0), g).assign(&new);
            } else {
                let wn = match fusion {
                    Fusion::Crossfade => crossfade_weight(j, k),
                    Fusion::Hard => 0.0,
                };
                let mut cell = out.index_axis_mut(Axis(0), g);
                cell.zip_mut_with(&new, |o, &v| *o = (1.0 - wn) * *o + wn * v);
            }
        }
    }
    out
}
