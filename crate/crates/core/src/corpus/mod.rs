//! Synthetic moving-shape corpus with planted defects, and the data filter.

pub mod filter;
pub mod scene;
pub mod scorers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::TrainingClip;
use crate::error::Result;
use crate::toy_vae::{PixelVideo, ToyVae};

pub use filter::{filter_corpus, FilterReport, FilterRule, FilterScores, FilterThresholds};
pub use scene::{render, Annotations, SceneSpec, ShapeKind, Trajectory, Variant, STYLE_PALETTE};
pub use scorers::{cut_count, estimate_centroids, first_last_similarity, max_centroid_step, motion_strength, Scorer};

/// What the generator planted in a clip, and so which filter rule should
/// reject it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planted {
    Good,
    Static,
    Multishot,
    /// Full circular sweep: the last frame equals the first.
    Loop,
    /// Teleporting variant of a good scene.
    Teleport,
}

impl Planted {
    pub fn expected_rule(self) -> Option<FilterRule> {
        match self {
            Planted::Good => None,
            Planted::Static => Some(FilterRule::Motion),
            Planted::Multishot | Planted::Teleport => Some(FilterRule::Cuts),
            Planted::Loop => Some(FilterRule::Similarity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub good: usize,
    /// Number of good scenes that also get a teleporting variant.
    pub teleport: usize,
    pub statics: usize,
    pub multishot: usize,
    pub loops: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Centroid path length (pixels) at or above which a clip is tagged
    /// `high_dynamics`.
    pub high_dynamics_path: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            good: 240,
            teleport: 40,
            statics: 12,
            multishot: 12,
            loops: 12,
            frames: 17,
            height: 32,
            width: 32,
            high_dynamics_path: 21.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: usize,
    /// Entries rendered from the same scene share this.
    pub scene_id: usize,
    pub planted: Planted,
    pub spec: SceneSpec,
    pub render_seed: u64,
    pub tags: Vec<String>,
    pub annotations: Annotations,
}

impl CorpusEntry {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub videos: Vec<PixelVideo>,
}

pub const HIGH_DYNAMICS: &str = "high_dynamics";

fn path_length(c: &[[f64; 2]]) -> f64 {
    c.windows(2)
        .map(|p| ((p[1][0] - p[0][0]).powi(2) + (p[1][1] - p[0][1]).powi(2)).sqrt())
        .sum()
}

struct SceneDraw<'a> {
    cfg: &'a CorpusConfig,
    rng: ChaCha8Rng,
}

impl SceneDraw<'_> {
    fn point(&mut self, margin: f64) -> [f64; 2] {
        [
            self.rng.random_range(margin..self.cfg.width as f64 - margin),
            self.rng.random_range(margin..self.cfg.height as f64 - margin),
        ]
    }

    fn base(&mut self, style: usize) -> SceneSpec {
        let shape = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Diamond][self.rng.random_range(0..3)];
        let bg = STYLE_PALETTE[style];
        let dark_bg = bg.iter().sum::<f64>() < 1.5;
        let color = std::array::from_fn(|c| {
            let delta = self.rng.random_range(0.55..0.65);
            if dark_bg {
                (bg[c] + delta).min(1.0)
            } else {
                (bg[c] - delta).max(0.0)
            }
        });
        SceneSpec {
            shape,
            color,
            size: self.rng.random_range(4.5..6.0),
            trajectory: Trajectory::Linear { waypoints: vec![] },
            style,
            frames: self.cfg.frames,
            height: self.cfg.height,
            width: self.cfg.width,
            variant: Variant::Smooth,
            second: None,
        }
    }

    /// Linear or partial circular motion; linear endpoints are far enough
    /// apart to support a teleporting variant.
    fn moving(&mut self, style: usize) -> SceneSpec {
        let mut spec = self.base(style);
        let margin = spec.extent() + 1.0;
        let min_jump = self.cfg.width as f64 / 2.0 + 2.0;
        if self.rng.random_bool(0.75) {
            let (a, b) = loop {
                let a = self.point(margin);
                let b = self.point(margin);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                if d >= min_jump && d <= min_jump + 8.0 {
                    break (a, b);
                }
            };
            let waypoints = if self.rng.random_bool(0.3) {
                let off = [self.rng.random_range(-4.0..4.0), self.rng.random_range(-4.0..4.0)];
                let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
                let mid = [
                    ((a[0] + b[0]) / 2.0 + off[0]).clamp(margin, w - margin),
                    ((a[1] + b[1]) / 2.0 + off[1]).clamp(margin, h - margin),
                ];
                vec![a, mid, b]
            } else {
                vec![a, b]
            };
            spec.trajectory = Trajectory::Linear { waypoints };
        } else {
            let sweep = self.rng.random_range(2.0..3.0);
            spec.trajectory = self.circle(&spec, sweep);
        }
        spec
    }

    fn circle(&mut self, spec: &SceneSpec, sweep: f64) -> Trajectory {
        let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
        let radius = self
            .rng
            .random_range(7.0..9.0f64)
            .min(w.min(h) / 2.0 - spec.extent() - 2.0);
        Trajectory::Circular {
            center: [
                w / 2.0 + self.rng.random_range(-1.0..1.0),
                h / 2.0 + self.rng.random_range(-1.0..1.0),
            ],
            radius,
            start_angle: self.rng.random_range(0.0..std::f64::consts::TAU),
            sweep: if self.rng.random_bool(0.5) { sweep } else { -sweep },
        }
    }
}

/// Generates the planted corpus. Specs are drawn sequentially from the seed,
/// rendering runs in parallel.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let mut draw = SceneDraw {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut plan: Vec<(usize, Planted, SceneSpec)> = Vec::new();
    let mut scene_id = 0;
    for i in 0..cfg.good {
        let style = draw.rng.random_range(0..STYLE_PALETTE.len());
        let spec = draw.moving(style);
        let teleport = i < cfg.teleport && matches!(spec.trajectory, Trajectory::Linear { .. });
        if teleport {
            let mut t = spec.clone();
            t.variant = Variant::Teleport;
            plan.push((scene_id, Planted::Good, spec));
            plan.push((scene_id, Planted::Teleport, t));
        } else {
            plan.push((scene_id, Planted::Good, spec));
        }
        scene_id += 1;
    }
    for _ in 0..cfg.statics {
        let style = draw.rng.random_range(0..STYLE_PALETTE.len());
        let mut spec = draw.moving(style);
        spec.variant = Variant::Static;
        plan.push((scene_id, Planted::Static, spec));
        scene_id += 1;
    }
    for _ in 0..cfg.multishot {
        let style = draw.rng.random_range(0..STYLE_PALETTE.len());
        let mut spec = draw.moving(style);
        // The second shot's background differs in mean brightness by at least 0.3.
        let bright = |s: usize| STYLE_PALETTE[s].iter().sum::<f64>() / 3.0;
        let far: Vec<usize> = (0..STYLE_PALETTE.len())
            .filter(|&s| (bright(s) - bright(style)).abs() >= 0.3)
            .collect();
        let other = far[draw.rng.random_range(0..far.len())];
        spec.variant = Variant::Multishot;
        spec.second = Some(Box::new(draw.moving(other)));
        plan.push((scene_id, Planted::Multishot, spec));
        scene_id += 1;
    }
    for _ in 0..cfg.loops {
        let style = draw.rng.random_range(0..STYLE_PALETTE.len());
        let mut spec = draw.base(style);
        spec.trajectory = draw.circle(&spec, std::f64::consts::TAU);
        plan.push((scene_id, Planted::Loop, spec));
        scene_id += 1;
    }
    let render_seed = |id: usize| cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(id as u64);
    let rendered: Vec<(PixelVideo, Annotations)> = plan
        .par_iter()
        .map(|(sid, _, spec)| render(spec, render_seed(*sid)))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(plan.len());
    let mut videos = Vec::with_capacity(plan.len());
    for (id, ((sid, planted, spec), (video, annotations))) in plan.into_iter().zip(rendered).enumerate() {
        let mut tags = Vec::new();
        if planted == Planted::Good && path_length(&annotations.centroids) >= cfg.high_dynamics_path {
            tags.push(HIGH_DYNAMICS.to_string());
        }
        entries.push(CorpusEntry {
            id,
            scene_id: sid,
            planted,
            spec,
            render_seed: render_seed(sid),
            tags,
            annotations,
        });
        videos.push(video);
    }
    Ok(Corpus { entries, videos })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Encodes the selected entries into training clips (posterior means).
    pub fn training_clips(&self, vae: &ToyVae, ids: &[usize]) -> Result<Vec<TrainingClip>> {
        ids.par_iter()
            .map(|&i| {
                let e = &self.entries[i];
                let video = self.videos[i].clone();
                let latent = vae.encode(&video)?.mean;
                Ok(TrainingClip {
                    video,
                    latent,
                    actions: e.annotations.actions.clone(),
                    prompt_id: e.spec.style,
                })
            })
            .collect()
    }

    /// Ids of entries the filter keeps.
    pub fn kept_ids(&self, reports: &[FilterReport]) -> Vec<usize> {
        reports
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kept)
            .map(|(i, _)| i)
            .collect()
    }
}
