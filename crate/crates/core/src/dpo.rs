//! Preference optimization on flow-matching losses, plus the two pair
//! construction pipelines.
//!
//! Exact likelihoods are unavailable for a flow model, so each log-ratio is
//! replaced by a difference of flow losses evaluated on a shared `(t, ε)`:
//!
//! `inner = −β·[(Lθ(w) − Lref(w)) − (Lθ(l) − Lref(l))]`, `loss = −ln σ(inner)`.

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{build_layout, ConditionLayout, ConditionSpec, Timeline};
use crate::corpus::{Corpus, Planted};
use crate::dit::{
    generate, DitConfig, FlowSample, LossTape, ModelParams, Optimizer, OptimizerConfig, ParamVec, SamplerOptions,
};
use crate::error::{Error, Result};
use crate::seeding::derive;
use crate::toy_vae::ToyVae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPipeline {
    AbruptCuts,
    SubjectMotion,
}

/// `(c, v_w, v_l)`: a shared condition and two latents, the winner scoring
/// strictly lower (better) than the loser.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub id: usize,
    pub pipeline: PairPipeline,
    pub layout: ConditionLayout,
    pub prompt: Vec<usize>,
    pub winner: Array4<f64>,
    pub loser: Array4<f64>,
    /// (winner score, loser score); lower is better for both pipelines.
    pub scores: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    /// Use one `(t, ε)` for winner and loser.
    pub shared_noise: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            shared_noise: true,
        }
    }
}

impl DpoConfig {
    fn check(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Time and noise for the winner and loser evaluations of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoDraw {
    pub t_w: f64,
    pub t_l: f64,
    pub noise_w: Array4<f64>,
    pub noise_l: Array4<f64>,
}

impl DpoDraw {
    pub fn sample<R: Rng + ?Sized>(shape: (usize, usize, usize, usize), shared: bool, rng: &mut R) -> Self {
        let mut noise = || Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng));
        let noise_w = noise();
        let noise_l = if shared { noise_w.clone() } else { noise() };
        let t_w = rng.random::<f64>();
        let t_l = if shared { t_w } else { rng.random::<f64>() };
        Self {
            t_w,
            t_l,
            noise_w,
            noise_l,
        }
    }
}

/// The four flow losses of one pair and the resulting objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoTerms {
    pub policy_w: f64,
    pub ref_w: f64,
    pub policy_l: f64,
    pub ref_l: f64,
    pub inner: f64,
    pub loss: f64,
}

impl DpoTerms {
    /// `(Lref(w) − Lθ(w)) − (Lref(l) − Lθ(l))`; positive when the policy
    /// favours the winner more than the reference does.
    pub fn margin(&self) -> f64 {
        (self.ref_w - self.policy_w) - (self.ref_l - self.policy_l)
    }
}

/// `ln(1 + e^{−x})`, stable for large `|x|`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Scalar objective from the four losses.
pub fn dpo_objective(beta: f64, policy_w: f64, ref_w: f64, policy_l: f64, ref_l: f64) -> DpoTerms {
    let inner = -beta * ((policy_w - ref_w) - (policy_l - ref_l));
    DpoTerms {
        policy_w,
        ref_w,
        policy_l,
        ref_l,
        inner,
        loss: neg_log_sigmoid(inner),
    }
}

fn flow_samples(pair: &PreferencePair, draw: &DpoDraw) -> (FlowSample, FlowSample) {
    let mk = |x: &Array4<f64>, noise: &Array4<f64>, t: f64| FlowSample {
        x: x.clone(),
        noise: noise.clone(),
        t,
        layout: pair.layout.clone(),
        prompt: pair.prompt.clone(),
    };
    (
        mk(&pair.winner, &draw.noise_w, draw.t_w),
        mk(&pair.loser, &draw.noise_l, draw.t_l),
    )
}

fn check_pair(pair: &PreferencePair, draw: &DpoDraw) -> Result<()> {
    if pair.winner.dim() != pair.loser.dim() || pair.winner.dim() != draw.noise_w.dim() {
        return Err(Error::Shape(format!(
            "pair {}: winner {:?}, loser {:?}, noise {:?}",
            pair.id,
            pair.winner.dim(),
            pair.loser.dim(),
            draw.noise_w.dim()
        )));
    }
    Ok(())
}

fn finite_terms(pair: &PreferencePair, terms: DpoTerms) -> Result<DpoTerms> {
    if [terms.policy_w, terms.ref_w, terms.policy_l, terms.ref_l, terms.loss]
        .iter()
        .all(|v| v.is_finite())
    {
        Ok(terms)
    } else {
        Err(Error::NonFinite(format!(
            "pair {}: Lθ(w)={} Lref(w)={} Lθ(l)={} Lref(l)={} loss={}",
            pair.id, terms.policy_w, terms.ref_w, terms.policy_l, terms.ref_l, terms.loss
        )))
    }
}

/// Objective of one pair on a given draw.
pub fn dpo_loss(
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &DitConfig,
    dcfg: &DpoConfig,
    pair: &PreferencePair,
    draw: &DpoDraw,
) -> Result<DpoTerms> {
    dcfg.check()?;
    check_pair(pair, draw)?;
    let (w, l) = flow_samples(pair, draw);
    let loss = |p: &ModelParams, s: &FlowSample| LossTape::record(p, cfg, s).map(|r| r.value());
    let terms = dpo_objective(
        dcfg.beta,
        loss(policy, &w)?,
        loss(reference, &w)?,
        loss(policy, &l)?,
        loss(reference, &l)?,
    );
    finite_terms(pair, terms)
}

/// Objective and `scale · ∇θ` of one pair.
pub fn dpo_loss_grad(
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &DitConfig,
    dcfg: &DpoConfig,
    pair: &PreferencePair,
    draw: &DpoDraw,
    scale: f64,
) -> Result<(DpoTerms, ParamVec)> {
    dcfg.check()?;
    check_pair(pair, draw)?;
    let (w, l) = flow_samples(pair, draw);
    let tape_w = LossTape::record(policy, cfg, &w)?;
    let tape_l = LossTape::record(policy, cfg, &l)?;
    let ref_w = LossTape::record(reference, cfg, &w)?.value();
    let ref_l = LossTape::record(reference, cfg, &l)?.value();
    let terms = finite_terms(
        pair,
        dpo_objective(dcfg.beta, tape_w.value(), ref_w, tape_l.value(), ref_l),
    )?;
    // d loss / d inner = −σ(−inner); d inner / dθ = −β (∇Lθ(w) − ∇Lθ(l)).
    let s = scale * dcfg.beta * crate::autodiff::sigmoid(-terms.inner);
    let mut g = tape_w.grad(policy, s);
    g.add_scaled(1.0, &tape_l.grad(policy, -s));
    Ok((terms, g))
}

/// Mean objective and gradient over `(pair, draw)` items, summed in order.
pub fn dpo_batch_grad(
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &DitConfig,
    dcfg: &DpoConfig,
    items: &[(&PreferencePair, DpoDraw)],
) -> Result<(f64, ParamVec)> {
    if items.is_empty() {
        return Err(Error::Invalid("empty preference batch".into()));
    }
    let n = items.len() as f64;
    let parts: Vec<(DpoTerms, ParamVec)> = items
        .par_iter()
        .map(|(p, d)| dpo_loss_grad(policy, reference, cfg, dcfg, p, d, 1.0 / n))
        .collect::<Result<_>>()?;
    let mut total = policy.zeros_like();
    let mut loss = 0.0;
    for (t, g) in &parts {
        loss += t.loss;
        total.add_scaled(1.0, g);
    }
    Ok((loss / n, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for DpoTrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 2,
            optimizer: OptimizerConfig::adam(2e-5),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub params: ModelParams,
    pub losses: Vec<f64>,
}

/// Minibatch descent on the mean objective. The reference stays untouched;
/// the policy starts from `policy`.
pub fn dpo_train(
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &DitConfig,
    dcfg: &DpoConfig,
    pairs: &[PreferencePair],
    tcfg: &DpoTrainConfig,
) -> Result<DpoOutcome> {
    dcfg.check()?;
    if pairs.is_empty() {
        return Err(Error::Invalid("no preference pairs".into()));
    }
    let mut params = policy.clone();
    let mut opt = Optimizer::new(tcfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut losses = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let items: Vec<(&PreferencePair, DpoDraw)> = (0..tcfg.batch_size.max(1))
            .map(|_| {
                let p = &pairs[rng.random_range(0..pairs.len())];
                (p, DpoDraw::sample(p.winner.dim(), dcfg.shared_noise, &mut rng))
            })
            .collect();
        let (loss, mut grad) = dpo_batch_grad(&params, reference, cfg, dcfg, &items)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        opt.step(&mut params, &mut grad);
        losses.push(loss);
        if step % 20 == 0 {
            log::debug!("dpo step {step}: loss {loss:.6}");
        }
    }
    Ok(DpoOutcome { params, losses })
}

/// Per-pair terms on fixed draws derived from `seed`.
pub fn evaluate_pairs(
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &DitConfig,
    dcfg: &DpoConfig,
    pairs: &[PreferencePair],
    seed: u64,
) -> Result<Vec<DpoTerms>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, i as u64));
            let draw = DpoDraw::sample(p.winner.dim(), dcfg.shared_noise, &mut rng);
            dpo_loss(policy, reference, cfg, dcfg, p, &draw)
        })
        .collect()
}

/// Largest mean squared difference between adjacent latent frames.
pub fn cut_severity(latent: &Array4<f64>) -> Result<f64> {
    let t = latent.len_of(Axis(0));
    if t < 2 {
        return Err(Error::Invalid(format!("cut severity needs 2 latent frames, got {t}")));
    }
    Ok((0..t - 1)
        .map(|k| {
            let d = &latent.index_axis(Axis(0), k + 1) - &latent.index_axis(Axis(0), k);
            d.mapv(|v| v * v).mean().unwrap_or(0.0)
        })
        .fold(0.0, f64::max))
}

/// Condition and prompt for one pipeline-A group.
#[derive(Debug, Clone)]
pub struct PairPrompt {
    pub layout: ConditionLayout,
    pub prompt: Vec<usize>,
}

/// First/last frame timeline of a video, the simplest two-anchor case.
pub fn first_last_timeline(video: &crate::toy_vae::PixelVideo, prompt_id: usize) -> Result<Timeline> {
    let last = video.len() - 1;
    Ok(Timeline::new(video.len(), prompt_id)
        .with(ConditionSpec::image(0, video.frame(0).to_owned())?)
        .with(ConditionSpec::image(last, video.frame(last).to_owned())?))
}

/// Image-only layouts do not consume randomness; this builds one without a
/// caller-supplied generator.
pub fn image_layout(tl: &Timeline, vae: &ToyVae, grid_hw: (usize, usize)) -> Result<ConditionLayout> {
    build_layout(tl, vae, grid_hw, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Seed of generation `g` for prompt `i`.
pub fn group_seed(seed: u64, i: usize, g: usize) -> u64 {
    derive(derive(seed, i as u64), g as u64)
}

/// Scores `group` generations per prompt with [`cut_severity`] and pairs the
/// best against the worst. Prompts whose scores all tie are skipped.
pub fn build_pairs_pipeline_a(
    params: &ModelParams,
    cfg: &DitConfig,
    prompts: &[PairPrompt],
    group: usize,
    sampler: SamplerOptions,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if group < 2 {
        return Err(Error::Config(format!("group size must be at least 2, got {group}")));
    }
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|i| (0..group).map(move |g| (i, g)))
        .collect();
    let videos: Vec<Array4<f64>> = jobs
        .par_iter()
        .map(|&(i, g)| {
            let p = &prompts[i];
            generate(params, cfg, &p.layout, &p.prompt, sampler, group_seed(seed, i, g))
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let vids = &videos[i * group..(i + 1) * group];
        let scores: Vec<f64> = vids.iter().map(cut_severity).collect::<Result<_>>()?;
        let (mut lo, mut hi) = (0, 0);
        for (g, &s) in scores.iter().enumerate() {
            if s < scores[lo] {
                lo = g;
            }
            if s > scores[hi] {
                hi = g;
            }
        }
        if scores[lo] >= scores[hi] {
            log::info!("prompt {i}: all {group} cut severities tie at {}, skipped", scores[lo]);
            continue;
        }
        pairs.push(PreferencePair {
            id: pairs.len(),
            pipeline: PairPipeline::AbruptCuts,
            layout: p.layout.clone(),
            prompt: p.prompt.clone(),
            winner: vids[lo].clone(),
            loser: vids[hi].clone(),
            scores: (scores[lo], scores[hi]),
        });
    }
    Ok(pairs)
}

/// Smooth (winner) versus teleporting (loser) renderings of the same scene,
/// sharing the scene's first/last frame condition. Scores are the ground-truth
/// largest single-step centroid displacements.
pub fn build_pairs_pipeline_b(corpus: &Corpus, vae: &ToyVae) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for (li, loser) in corpus.entries.iter().enumerate() {
        if loser.planted != Planted::Teleport {
            continue;
        }
        let Some(wi) = corpus
            .entries
            .iter()
            .position(|e| e.scene_id == loser.scene_id && e.planted == Planted::Good)
        else {
            log::info!("scene {}: no smooth variant, skipped", loser.scene_id);
            continue;
        };
        let winner = &corpus.entries[wi];
        let wv = &corpus.videos[wi];
        let zw = vae.encode(wv)?.mean;
        let zl = vae.encode(&corpus.videos[li])?.mean;
        let (_, h, w) = zw.grid();
        let tl = first_last_timeline(wv, winner.spec.style)?;
        pairs.push(PreferencePair {
            id: pairs.len(),
            pipeline: PairPipeline::SubjectMotion,
            layout: image_layout(&tl, vae, (h, w))?,
            prompt: vec![winner.spec.style],
            winner: zw.data,
            loser: zl.data,
            scores: (winner.annotations.max_step(), loser.annotations.max_step()),
        });
    }
    Ok(pairs)
}
