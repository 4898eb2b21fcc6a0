//! Procedural moving-shape scenes.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ActionInterval;
use crate::error::{Error, Result};
use crate::toy_vae::PixelVideo;

/// Background colour per style token.
pub const STYLE_PALETTE: [[f64; 3]; 16] = [
    [0.10, 0.10, 0.30],
    [0.30, 0.10, 0.10],
    [0.10, 0.30, 0.10],
    [0.25, 0.25, 0.25],
    [0.35, 0.20, 0.05],
    [0.05, 0.25, 0.35],
    [0.30, 0.05, 0.30],
    [0.15, 0.15, 0.05],
    [0.85, 0.85, 0.75],
    [0.75, 0.85, 0.90],
    [0.90, 0.75, 0.80],
    [0.80, 0.90, 0.75],
    [0.60, 0.60, 0.65],
    [0.50, 0.35, 0.20],
    [0.20, 0.45, 0.45],
    [0.45, 0.20, 0.45],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
    Diamond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Piecewise-linear path visiting the waypoints at equal time intervals;
    /// each leg is one annotated action.
    Linear { waypoints: Vec<[f64; 2]> },
    Circular {
        center: [f64; 2],
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Smooth,
    /// Jumps between the trajectory's start and end every frame, finishing
    /// at the end.
    Teleport,
    Static,
    /// Second half of the frames comes from an unrelated scene.
    Multishot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: [f64; 3],
    /// Half-extent of the shape in pixels.
    pub size: f64,
    pub trajectory: Trajectory,
    pub style: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub variant: Variant,
    /// Scene spliced in for `Multishot`.
    pub second: Option<Box<SceneSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    /// Ground-truth shape centre `(x, y)` per frame.
    pub centroids: Vec<[f64; 2]>,
    pub actions: Vec<ActionInterval>,
}

impl Annotations {
    /// Largest centroid displacement between adjacent frames.
    pub fn max_step(&self) -> f64 {
        self.centroids
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Soft edge width in pixels.
const EDGE: f64 = 2.0;

impl SceneSpec {
    fn smooth_position(&self, f: usize) -> [f64; 2] {
        let s = if self.frames > 1 {
            f as f64 / (self.frames - 1) as f64
        } else {
            0.0
        };
        match &self.trajectory {
            Trajectory::Linear { waypoints } => {
                if waypoints.len() == 1 {
                    return waypoints[0];
                }
                let legs = waypoints.len() - 1;
                let pos = s * legs as f64;
                let i = (pos.floor() as usize).min(legs - 1);
                let u = pos - i as f64;
                let (a, b) = (waypoints[i], waypoints[i + 1]);
                [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
            }
            Trajectory::Circular {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let ang = start_angle + sweep * s;
                [center[0] + radius * ang.cos(), center[1] + radius * ang.sin()]
            }
        }
    }

    pub fn position(&self, f: usize) -> [f64; 2] {
        match self.variant {
            Variant::Smooth | Variant::Multishot => self.smooth_position(f),
            Variant::Static => self.smooth_position(0),
            Variant::Teleport => {
                let last = self.frames - 1;
                if f % 2 == 1 || f == last {
                    self.smooth_position(last)
                } else {
                    self.smooth_position(0)
                }
            }
        }
    }

    fn actions(&self) -> Vec<ActionInterval> {
        let last = self.frames - 1;
        match (&self.trajectory, self.variant) {
            (Trajectory::Linear { waypoints }, Variant::Smooth) if waypoints.len() > 2 => {
                let legs = waypoints.len() - 1;
                (0..legs)
                    .map(|i| ActionInterval {
                        start: (i * last + legs / 2) / legs,
                        end: ((i + 1) * last + legs / 2) / legs,
                    })
                    .collect()
            }
            _ => vec![ActionInterval { start: 0, end: last }],
        }
    }

    /// Half-extent of the shape along the image axes.
    pub fn extent(&self) -> f64 {
        match self.shape {
            ShapeKind::Diamond => self.size * 1.25,
            ShapeKind::Disc | ShapeKind::Square => self.size,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Spec("scene has an empty dimension".into()));
        }
        if self.style >= STYLE_PALETTE.len() {
            return Err(Error::Spec(format!("style {} has no palette entry", self.style)));
        }
        if let Trajectory::Linear { waypoints } = &self.trajectory {
            if waypoints.is_empty() {
                return Err(Error::Spec("linear trajectory needs a waypoint".into()));
            }
        }
        for f in 0..self.frames {
            let [x, y] = self.position(f);
            let e = self.extent();
            if x - e < 0.0 || y - e < 0.0 || x + e > self.width as f64 || y + e > self.height as f64 {
                return Err(Error::Spec(format!(
                    "shape leaves the frame at frame {f} (centre {x:.1}, {y:.1})"
                )));
            }
        }
        if self.variant == Variant::Teleport {
            let a = self.position(0);
            let b = self.position(self.frames - 1);
            let jump = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if jump <= self.width as f64 / 2.0 {
                return Err(Error::Spec(format!(
                    "teleport jump {jump:.1}px does not exceed half the frame width"
                )));
            }
        }
        if self.variant == Variant::Multishot {
            let Some(second) = &self.second else {
                return Err(Error::Spec("multishot scene needs a second scene".into()));
            };
            if (second.frames, second.height, second.width) != (self.frames, self.height, self.width) {
                return Err(Error::Spec("multishot scenes must share dimensions".into()));
            }
            second.validate()?;
        }
        Ok(())
    }

    /// Signed distance from `(x, y)` to the shape outline, negative inside.
    fn signed_distance(&self, centre: [f64; 2], x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - centre[0], y - centre[1]);
        match self.shape {
            ShapeKind::Disc => (dx * dx + dy * dy).sqrt() - self.size,
            ShapeKind::Square => dx.abs().max(dy.abs()) - self.size,
            ShapeKind::Diamond => (dx.abs() + dy.abs() - self.size * 1.25) / std::f64::consts::SQRT_2,
        }
    }
}

/// Rasterizes `spec`. The seed picks a faint background gradient direction.
pub fn render(spec: &SceneSpec, seed: u64) -> Result<(PixelVideo, Annotations)> {
    spec.validate()?;
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut frames = Array4::zeros((t, h, w, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grad_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (grad_dir.cos(), grad_dir.sin());
    let second_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let mut centroids = Vec::with_capacity(t);
    for f in 0..t {
        let (scene, dir) = match (&spec.second, spec.variant) {
            (Some(second), Variant::Multishot) if f >= t / 2 => (second.as_ref(), (second_dir.cos(), second_dir.sin())),
            _ => (spec, (gx, gy)),
        };
        let centre = scene.position(f);
        centroids.push(centre);
        let bg = STYLE_PALETTE[scene.style];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let shade = 0.04 * ((px / w as f64 - 0.5) * dir.0 + (py / h as f64 - 0.5) * dir.1);
                let d = scene.signed_distance(centre, px, py);
                let alpha = (0.5 - d / EDGE).clamp(0.0, 1.0);
                for c in 0..3 {
                    let back = (bg[c] + shade).clamp(0.0, 1.0);
                    frames[[f, y, x, c]] = back * (1.0 - alpha) + scene.color[c] * alpha;
                }
            }
        }
    }
    let video = PixelVideo::new(frames, 8.0)?;
    Ok((
        video,
        Annotations {
            centroids,
            actions: spec.actions(),
        },
    ))
}
