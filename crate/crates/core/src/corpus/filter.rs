use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scorers::{cut_count, first_last_similarity, motion_strength, AestheticStub, Scorer};
use crate::error::Result;
use crate::toy_vae::PixelVideo;

/// Filter thresholds, calibrated on the planted corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    /// Reject when first/last similarity exceeds this.
    pub similarity_max: f64,
    /// Reject when motion strength is below this.
    pub motion_min: f64,
    /// Adjacent-frame mean squared difference counted as a cut.
    pub cut_jump: f64,
    pub cut_count_max: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            similarity_max: 0.98,
            motion_min: 0.002,
            cut_jump: 0.03,
            cut_count_max: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    Cuts,
    Motion,
    Similarity,
    Aesthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterScores {
    pub first_last_similarity: f64,
    pub motion_strength: f64,
    pub cut_count: usize,
    pub aesthetic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub scores: FilterScores,
    pub kept: bool,
    pub failed_rule: Option<FilterRule>,
}

pub fn score_video(v: &PixelVideo, th: &FilterThresholds) -> Result<FilterScores> {
    Ok(FilterScores {
        first_last_similarity: first_last_similarity(v)?,
        motion_strength: motion_strength(v)?,
        cut_count: cut_count(v, th.cut_jump),
        aesthetic: AestheticStub::default().score(v),
    })
}

/// Applies the rules in order cuts, motion, similarity, aesthetic and reports
/// the first one that fails.
pub fn decide(scores: &FilterScores, th: &FilterThresholds, aesthetic_min: f64) -> FilterReport {
    let failed_rule = if scores.cut_count > th.cut_count_max {
        Some(FilterRule::Cuts)
    } else if scores.motion_strength < th.motion_min {
        Some(FilterRule::Motion)
    } else if scores.first_last_similarity > th.similarity_max {
        Some(FilterRule::Similarity)
    } else if scores.aesthetic < aesthetic_min {
        Some(FilterRule::Aesthetic)
    } else {
        None
    };
    FilterReport {
        scores: scores.clone(),
        kept: failed_rule.is_none(),
        failed_rule,
    }
}

/// Scores and filters every video in parallel; reports keep input order.
pub fn filter_corpus(videos: &[PixelVideo], th: &FilterThresholds) -> Result<Vec<FilterReport>> {
    filter_corpus_with(videos, th, &AestheticStub::default())
}

pub fn filter_corpus_with(
    videos: &[PixelVideo],
    th: &FilterThresholds,
    aesthetic: &dyn Scorer,
) -> Result<Vec<FilterReport>> {
    videos
        .par_iter()
        .map(|v| {
            let mut scores = score_video(v, th)?;
            scores.aesthetic = aesthetic.score(v);
            Ok(decide(&scores, th, aesthetic.min_score()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(sim: f64, motion: f64, cuts: usize) -> FilterScores {
        FilterScores {
            first_last_similarity: sim,
            motion_strength: motion,
            cut_count: cuts,
            aesthetic: 0.2,
        }
    }

    #[test]
    fn first_failing_rule_is_reported() {
        let th = FilterThresholds::default();
        assert_eq!(
            decide(&scores(1.0, 0.0, 3), &th, 0.0).failed_rule,
            Some(FilterRule::Cuts)
        );
        assert_eq!(
            decide(&scores(1.0, 0.0, 0), &th, 0.0).failed_rule,
            Some(FilterRule::Motion)
        );
        assert_eq!(
            decide(&scores(1.0, 0.1, 0), &th, 0.0).failed_rule,
            Some(FilterRule::Similarity)
        );
        assert_eq!(
            decide(&scores(0.5, 0.1, 0), &th, 0.5).failed_rule,
            Some(FilterRule::Aesthetic)
        );
        let kept = decide(&scores(0.5, 0.1, 0), &th, 0.0);
        assert!(kept.kept && kept.failed_rule.is_none());
    }
}
