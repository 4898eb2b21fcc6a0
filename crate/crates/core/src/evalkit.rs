//! Desk-scale evaluation metrics and report files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{ConditionPayload, Timeline};
use crate::error::{Error, Result};
use crate::sar::SegmentPlan;
use crate::toy_vae::PixelVideo;

pub const PSNR_CAP: f64 = 99.0;

/// Join/interior ratio reported when interior jumps are exactly zero but
/// join jumps are not.
pub const RATIO_SENTINEL: f64 = 1.0e9;

/// Metrics in these reports stand in for human preference studies.
pub const SUBSTITUTE_METRICS: [&str; 4] = [
    "condition_psnr: pixel PSNR at anchored frames, in place of human fidelity ratings",
    "join_continuity: join/interior adjacent-latent jump ratio, in place of human continuity ratings",
    "cut_severity: max adjacent-latent mean squared difference, in place of human cut judgements",
    "color_drift: mean absolute per-frame colour-mean error, in place of human flicker ratings",
];

/// `10·log10(1 / MSE)` for pixels in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("frames {:?} and {:?} differ", a.dim(), b.dim())));
    }
    let mse = (&a - &b).mapv(|v| v * v).mean().unwrap_or(0.0);
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// PSNR of each condition against the generated frames it was anchored to.
/// Clip conditions are scored over all their frames jointly. Anchors are read
/// as given, so pass the snapped timeline.
pub fn condition_psnr(generated: &PixelVideo, tl: &Timeline) -> Result<Vec<f64>> {
    if generated.len() != tl.total_frames {
        return Err(Error::Shape(format!(
            "generated video has {} frames, timeline {}",
            generated.len(),
            tl.total_frames
        )));
    }
    tl.conditions
        .iter()
        .map(|c| {
            let ConditionPayload::Pixels(v) = &c.payload else {
                return Err(Error::Invalid("latent conditions have no pixel reference".into()));
            };
            let end = c.anchor_frame + v.len();
            if end > generated.len() {
                return Err(Error::Range {
                    what: "condition frame",
                    index: end - 1,
                    len: generated.len(),
                });
            }
            let got = generated.frames().slice(s![c.anchor_frame..end, .., .., ..]);
            if got.dim() != v.frames().dim() {
                return Err(Error::Shape("condition and generated frame sizes differ".into()));
            }
            let mse = (&got - v.frames()).mapv(|x| x * x).mean().unwrap_or(0.0);
            Ok(psnr_from_mse(mse))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JoinStats {
    pub join_mean: f64,
    pub interior_mean: f64,
    pub ratio: f64,
    pub joins: usize,
    pub interior: usize,
}

/// Adjacent latent-frame mean squared differences, split into transitions
/// near segment joins and the rest. A join region runs from one frame before
/// a segment's start to one frame after the previous segment's end.
pub fn join_continuity(latent: &Array4<f64>, plan: &SegmentPlan) -> Result<JoinStats> {
    let t = latent.len_of(Axis(0));
    if t != plan.latent_len {
        return Err(Error::Shape(format!(
            "latent has {t} frames, plan covers {}",
            plan.latent_len
        )));
    }
    let mut is_join = vec![false; t.saturating_sub(1)];
    for pair in plan.segments.windows(2) {
        let lo = pair[1].start.saturating_sub(1);
        let hi = (pair[0].end + 1).min(t - 1);
        for k in lo..hi {
            is_join[k] = true;
        }
    }
    let (mut js, mut jn, mut is, mut inn) = (0.0, 0usize, 0.0, 0usize);
    for (k, &join) in is_join.iter().enumerate() {
        let d = &latent.index_axis(Axis(0), k + 1) - &latent.index_axis(Axis(0), k);
        let msd = d.mapv(|v| v * v).mean().unwrap_or(0.0);
        if join {
            js += msd;
            jn += 1;
        } else {
            is += msd;
            inn += 1;
        }
    }
    let join_mean = if jn > 0 { js / jn as f64 } else { 0.0 };
    let interior_mean = if inn > 0 { is / inn as f64 } else { 0.0 };
    let ratio = if jn == 0 || join_mean == interior_mean {
        1.0
    } else if interior_mean == 0.0 {
        RATIO_SENTINEL
    } else {
        join_mean / interior_mean
    };
    Ok(JoinStats {
        join_mean,
        interior_mean,
        ratio,
        joins: jn,
        interior: inn,
    })
}

/// Mean over frames and channels of the absolute difference between the
/// spatial colour means of `generated` and `reference`.
pub fn color_drift(generated: &Array4<f64>, reference: &Array4<f64>) -> Result<f64> {
    if generated.dim() != reference.dim() {
        return Err(Error::Shape(format!(
            "{:?} and {:?} differ",
            generated.dim(),
            reference.dim()
        )));
    }
    let (t, _, _, c) = generated.dim();
    if t == 0 || c == 0 {
        return Err(Error::Invalid("empty video".into()));
    }
    let mut acc = 0.0;
    for k in 0..t {
        for ch in 0..c {
            let a = generated.slice(s![k, .., .., ch]).mean().unwrap_or(0.0);
            let b = reference.slice(s![k, .., .., ch]).mean().unwrap_or(0.0);
            acc += (a - b).abs();
        }
    }
    Ok(acc / (t * c) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub config_hash: String,
}

impl MetricSummary {
    pub fn new(values: &[f64], config_hash: &str) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("metric has no samples".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
            config_hash: config_hash.to_string(),
        })
    }
}

/// `b − a` on the same inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub a: String,
    pub b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub metric: String,
    pub sample: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub substitute_metrics: Vec<String>,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub comparisons: Vec<Comparison>,
    pub rows: Vec<SampleRow>,
}

impl Default for EvalReport {
    fn default() -> Self {
        Self {
            substitute_metrics: SUBSTITUTE_METRICS.iter().map(|s| s.to_string()).collect(),
            metrics: BTreeMap::new(),
            comparisons: Vec::new(),
            rows: Vec::new(),
        }
    }
}

/// Hex SHA-256 of the JSON encoding of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl EvalReport {
    pub fn add_metric(&mut self, name: &str, values: &[f64], config_hash: &str) -> Result<()> {
        self.metrics
            .insert(name.to_string(), MetricSummary::new(values, config_hash)?);
        self.rows.extend(values.iter().enumerate().map(|(i, &value)| SampleRow {
            metric: name.to_string(),
            sample: i,
            value,
        }));
        Ok(())
    }

    /// Records `b − a` for two metrics already in the report, which must
    /// have been computed on the same number of inputs.
    pub fn compare(&mut self, metric: &str, a: &str, b: &str) -> Result<f64> {
        let get = |k: &str| {
            self.metrics
                .get(k)
                .ok_or_else(|| Error::Invalid(format!("metric `{k}` not in report")))
        };
        let (ma, mb) = (get(a)?, get(b)?);
        if ma.n != mb.n {
            return Err(Error::Invalid(format!(
                "`{a}` has {} samples, `{b}` has {}",
                ma.n, mb.n
            )));
        }
        let delta = mb.mean - ma.mean;
        self.comparisons.push(Comparison {
            metric: metric.to_string(),
            a: a.to_string(),
            b: b.to_string(),
            mean_a: ma.mean,
            mean_b: mb.mean,
            delta,
        });
        Ok(delta)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Per-sample rows as `metric,sample,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "metric,sample,value")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.metric, r.sample, r.value)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::ConditionSpec;
    use crate::sar::plan_segments;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn psnr_formula_and_cap() {
        let a = Array3::from_elem((4, 4, 3), 0.5);
        assert_eq!(psnr(a.view(), a.view()).unwrap(), PSNR_CAP);
        let b = a.mapv(|v| v + 0.1);
        assert!((psnr(a.view(), b.view()).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn one_value_per_condition() {
        let frames = Array4::from_shape_fn((9, 4, 4, 3), |(f, y, x, c)| ((f + y + x + c) % 5) as f64 / 5.0);
        let video = PixelVideo::new(frames, 8.0).unwrap();
        let tl = Timeline::new(9, 0)
            .with(ConditionSpec::image(0, video.frame(0).to_owned()).unwrap())
            .with(ConditionSpec::clip(4, video.sub_clip(4, 5).unwrap()));
        let p = condition_psnr(&video, &tl).unwrap();
        assert_eq!(p, vec![PSNR_CAP, PSNR_CAP]);
        let short = video.sub_clip(0, 8).unwrap();
        assert!(condition_psnr(&short, &tl).is_err());
    }

    #[test]
    fn single_segment_and_constant_conventions() {
        let plan = plan_segments(6, &[0], 8, 2).unwrap();
        let z = Array4::from_shape_fn((6, 2, 2, 3), |(t, ..)| t as f64);
        let s = join_continuity(&z, &plan).unwrap();
        assert_eq!(s.joins, 0);
        assert_eq!(s.ratio, 1.0);

        let plan = plan_segments(16, &[0, 5, 12], 8, 2).unwrap();
        let z = Array4::zeros((16, 2, 2, 3));
        let s = join_continuity(&z, &plan).unwrap();
        assert!(s.joins > 0);
        assert_eq!(s.ratio, 1.0);
    }

    #[test]
    fn jump_only_at_a_join_hits_the_sentinel() {
        let plan = plan_segments(16, &[0, 5, 12], 8, 2).unwrap();
        let b = plan.segments[1].start;
        let z = Array4::from_shape_fn((16, 2, 2, 3), |(t, ..)| if t >= b { 1.0 } else { 0.0 });
        let s = join_continuity(&z, &plan).unwrap();
        assert!(s.join_mean > 0.0);
        assert_eq!(s.interior_mean, 0.0);
        assert_eq!(s.ratio, RATIO_SENTINEL);
        assert!(join_continuity(&Array4::zeros((15, 2, 2, 3)), &plan).is_err());
    }

    #[test]
    fn drift_examples() {
        let a = Array4::from_elem((3, 2, 2, 3), 0.5);
        assert_eq!(color_drift(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.slice_mut(s![.., .., .., 0]).mapv_inplace(|v| v + 0.3);
        assert!((color_drift(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        assert!(color_drift(&a, &Array4::zeros((2, 2, 2, 3))).is_err());
    }

    #[test]
    fn report_round_trips_and_hashes_are_stable() {
        let mut r = EvalReport::default();
        let h = config_hash(&("cfg", 3)).unwrap();
        assert_eq!(h, config_hash(&("cfg", 3)).unwrap());
        assert_eq!(h.len(), 64);
        r.add_metric("pre", &[1.0, 2.0, 3.0], &h).unwrap();
        r.add_metric("post", &[0.5, 1.0, 1.5], &h).unwrap();
        let d = r.compare("cut_severity", "pre", "post").unwrap();
        assert!((d + 1.0).abs() < 1e-12);
        assert!(r.add_metric("empty", &[], &h).is_err());
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.substitute_metrics.len(), SUBSTITUTE_METRICS.len());
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    }

    proptest! {
        #[test]
        fn psnr_never_exceeds_cap(v in prop::collection::vec(0.0f64..1.0, 12), e in 0.0f64..0.5) {
            let a = Array3::from_shape_vec((2, 2, 3), v).unwrap();
            let b = a.mapv(|x| x + e);
            let p = psnr(a.view(), b.view()).unwrap();
            prop_assert!(p <= PSNR_CAP);
        }

        #[test]
        fn ratio_is_scale_invariant(seed in 0u64..200, k in 0.1f64..10.0) {
            let plan = plan_segments(20, &[0, 6, 13], 8, 2).unwrap();
            let z = crate::dit::seeded_noise((20, 2, 2, 3), seed);
            let a = join_continuity(&z, &plan).unwrap();
            let b = join_continuity(&z.mapv(|v| v * k), &plan).unwrap();
            prop_assert!((a.ratio - b.ratio).abs() < 1e-9 * a.ratio.max(1.0));
        }
    }
}
