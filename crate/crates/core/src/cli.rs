//! Command-line surface: one subcommand per pipeline stage plus generation,
//! super-resolution and a resumable end-to-end pipeline.
//!
//! Every stage reads and writes files under the output root and records the
//! SHA-256 of its inputs and outputs in `manifest.json`. The pipeline skips a
//! stage when its config hash, input hashes and output hashes all match the
//! manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::conditioning::{ConditionLayout, ConditionSpec, RopeAnchor, Timeline};
use crate::corpus::{
    build_corpus, estimate_centroids, filter_corpus, max_centroid_step, Corpus, CorpusConfig, CorpusEntry,
    FilterReport, FilterThresholds, HIGH_DYNAMICS,
};
use crate::dit::{self, DitConfig, ModelParams, OptimizerConfig, SamplerOptions, TrainConfig};
use crate::dpo::{
    build_pairs_pipeline_a, build_pairs_pipeline_b, cut_severity, dpo_train, image_layout, DpoConfig, DpoTrainConfig,
    PairPipeline, PairPrompt, PreferencePair,
};
use crate::error::Error;
use crate::evalkit::{condition_psnr, config_hash, EvalReport};
use crate::io::{self, TensorFile};
use crate::sar::{generate_long, Fusion, SarConfig};
use crate::seeding::derive;
use crate::sr::{sr_generate, sr_train, sr_training_clip, SrConfig, SrTrainConfig};
use crate::toy_vae::{LatentVideo, PixelVideo, ToyVae};

pub const OUT_ENV: &str = "ONESHOT_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "oneshot",
    version,
    about = "Desk-scale conditioned one-shot video generation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration JSON; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Print the effective run configuration as JSON.
    Config {
        /// Start from the small smoke-test configuration.
        #[arg(long)]
        smoke: bool,
    },
    GenCorpus,
    Filter,
    Train,
    Sft,
    DpoPairs,
    DpoTrain,
    Eval,
    /// Run every stage in order, skipping stages whose artifacts are current.
    Pipeline,
    /// Generate a timeline; long timelines go through segment-wise generation.
    Generate {
        #[arg(long)]
        timeline: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (defaults to `<out>/generate`).
        #[arg(long)]
        dest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FusionArg::Crossfade)]
        fusion: FusionArg,
    },
    /// Write a timeline of image conditions taken from a corpus clip.
    Timeline {
        #[arg(long)]
        path: PathBuf,
        /// Corpus clip supplying the condition frames.
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 33)]
        frames: usize,
        /// Anchor frames, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        anchors: Vec<usize>,
    },
    /// Train the super-resolution model on pooled corpus clips.
    SrTrain,
    /// Upscale a low-res latent with the super-resolution model.
    Sr {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        timeline: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FusionArg {
    Crossfade,
    Hard,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Crossfade => Fusion::Crossfade,
            FusionArg::Hard => Fusion::Hard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoSection {
    /// Pipeline-A prompts (first-frame timelines of training clips).
    pub prompts: usize,
    pub group: usize,
    pub sampler_steps: usize,
    pub pipelines: Vec<PairPipeline>,
    pub objective: DpoConfig,
    pub train: DpoTrainConfig,
}

impl Default for DpoSection {
    fn default() -> Self {
        Self {
            prompts: 50,
            group: 4,
            sampler_steps: 8,
            pipelines: vec![PairPipeline::AbruptCuts, PairPipeline::SubjectMotion],
            objective: DpoConfig::default(),
            train: DpoTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SarSection {
    pub tail: usize,
    pub fusion: Fusion,
}

impl Default for SarSection {
    fn default() -> Self {
        Self {
            tail: 2,
            fusion: Fusion::Crossfade,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrSection {
    pub model: SrConfig,
    pub train: TrainConfig,
    pub shift: SrTrainConfig,
    /// Spatial pooling applied to corpus frames to get SR ground truth.
    pub pool: usize,
    pub frames: usize,
    /// Patch size of the SR latent.
    pub patch: usize,
}

impl Default for SrSection {
    fn default() -> Self {
        Self {
            model: SrConfig::default(),
            train: TrainConfig {
                steps: 2000,
                ..TrainConfig::desk_scale(0)
            },
            shift: SrTrainConfig::default(),
            pool: 2,
            frames: 9,
            patch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub samples: usize,
    pub sampler_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 20,
            sampler_steps: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub filter: FilterThresholds,
    /// Kept clips reserved for evaluation, taken from the end of the list.
    pub holdout: usize,
    pub model: DitConfig,
    pub train: TrainConfig,
    /// Continued training on high-dynamics clips.
    pub sft: TrainConfig,
    pub dpo: DpoSection,
    pub sar: SarSection,
    pub sr: SrSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            filter: FilterThresholds::default(),
            holdout: 20,
            model: DitConfig::default(),
            train: TrainConfig::desk_scale(0),
            sft: TrainConfig {
                steps: 300,
                optimizer: OptimizerConfig::adam(2e-4),
                ..TrainConfig::desk_scale(0)
            },
            dpo: DpoSection::default(),
            sar: SarSection::default(),
            sr: SrSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// A configuration small enough to run every stage in seconds.
    pub fn smoke() -> Self {
        let model = DitConfig {
            embed_dim: 16,
            heads: 2,
            blocks: 1,
            rope_split: [2, 2, 4],
            mlp_ratio: 2,
            time_features: 8,
            sampler_steps: 2,
            ..DitConfig::default()
        };
        let short = |steps| TrainConfig {
            steps,
            ..TrainConfig::desk_scale(0)
        };
        Self {
            corpus: CorpusConfig {
                good: 12,
                teleport: 4,
                statics: 2,
                multishot: 2,
                loops: 2,
                ..CorpusConfig::default()
            },
            holdout: 3,
            model,
            train: short(6),
            sft: short(3),
            dpo: DpoSection {
                prompts: 3,
                group: 2,
                sampler_steps: 2,
                train: DpoTrainConfig {
                    steps: 3,
                    ..DpoTrainConfig::default()
                },
                ..DpoSection::default()
            },
            sr: SrSection {
                model: SrConfig {
                    model: DitConfig {
                        embed_dim: 16,
                        blocks: 1,
                        rope_split: [2, 2, 4],
                        time_features: 8,
                        sampler_steps: 2,
                        ..SrConfig::default().model
                    },
                    ..SrConfig::default()
                },
                train: short(3),
                ..SrSection::default()
            },
            eval: EvalSection {
                samples: 3,
                sampler_steps: 2,
            },
            ..Self::default()
        }
    }

    /// Sets the global seed and derives every stage seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.train.seed = derive(seed, 1);
        self.sft.seed = derive(seed, 2);
        self.dpo.train.seed = derive(seed, 3);
        self.sr.train.seed = derive(seed, 4);
        self
    }

    fn stage_seed(&self, index: u64) -> u64 {
        derive(self.seed, index)
    }
}

/// Loads `path` (or defaults) and applies the seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<RunConfig>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let seed = seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: Value,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenCorpus,
    Filter,
    Train,
    Sft,
    DpoPairs,
    DpoTrain,
    Eval,
    SrTrain,
}

pub const PIPELINE: [Stage; 7] = [
    Stage::GenCorpus,
    Stage::Filter,
    Stage::Train,
    Stage::Sft,
    Stage::DpoPairs,
    Stage::DpoTrain,
    Stage::Eval,
];

const CORPUS_MANIFEST: &str = "corpus/manifest.json";
const CORPUS_VIDEOS: &str = "corpus/videos.dmt";
const FILTER_REPORT: &str = "filter/report.json";
const BASE_CKPT: &str = "train/base.dmt";
const BASE_LOSSES: &str = "train/losses.json";
const SFT_CKPT: &str = "sft/sft.dmt";
const SFT_LOSSES: &str = "sft/losses.json";
const PAIRS: &str = "dpo/pairs.dmt";
const DPO_CKPT: &str = "dpo/policy.dmt";
const DPO_LOSSES: &str = "dpo/losses.json";
const EVAL_JSON: &str = "eval/report.json";
const EVAL_CSV: &str = "eval/report.csv";
const SR_CKPT: &str = "sr/sr.dmt";
const SR_LOSSES: &str = "sr/losses.json";

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Filter => "filter",
            Stage::Train => "train",
            Stage::Sft => "sft",
            Stage::DpoPairs => "dpo-pairs",
            Stage::DpoTrain => "dpo-train",
            Stage::Eval => "eval",
            Stage::SrTrain => "sr-train",
        }
    }

    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::GenCorpus => &[],
            Stage::Filter => &[CORPUS_MANIFEST, CORPUS_VIDEOS],
            Stage::Train | Stage::SrTrain => &[CORPUS_MANIFEST, CORPUS_VIDEOS, FILTER_REPORT],
            Stage::Sft => &[CORPUS_MANIFEST, CORPUS_VIDEOS, FILTER_REPORT, BASE_CKPT],
            Stage::DpoPairs => &[CORPUS_MANIFEST, CORPUS_VIDEOS, FILTER_REPORT, SFT_CKPT],
            Stage::DpoTrain => &[SFT_CKPT, PAIRS],
            Stage::Eval => &[CORPUS_MANIFEST, CORPUS_VIDEOS, FILTER_REPORT, SFT_CKPT, DPO_CKPT],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::GenCorpus => &[CORPUS_MANIFEST, CORPUS_VIDEOS],
            Stage::Filter => &[FILTER_REPORT],
            Stage::Train => &[BASE_CKPT, BASE_LOSSES],
            Stage::Sft => &[SFT_CKPT, SFT_LOSSES],
            Stage::DpoPairs => &[PAIRS],
            Stage::DpoTrain => &[DPO_CKPT, DPO_LOSSES],
            Stage::Eval => &[EVAL_JSON, EVAL_CSV],
            Stage::SrTrain => &[SR_CKPT, SR_LOSSES],
        }
    }

    /// Hash of the configuration sections the stage depends on.
    pub fn config_hash(self, cfg: &RunConfig) -> crate::Result<String> {
        let section = match self {
            Stage::GenCorpus => json!(cfg.corpus),
            Stage::Filter => json!(cfg.filter),
            Stage::Train => json!([cfg.model, cfg.train, cfg.holdout]),
            Stage::Sft => json!([cfg.sft, cfg.holdout]),
            Stage::DpoPairs => json!([
                cfg.dpo.prompts,
                cfg.dpo.group,
                cfg.dpo.sampler_steps,
                cfg.dpo.pipelines,
                cfg.holdout,
                cfg.seed
            ]),
            Stage::DpoTrain => json!([cfg.dpo.objective, cfg.dpo.train]),
            Stage::Eval => json!([cfg.eval, cfg.holdout, cfg.seed]),
            Stage::SrTrain => json!([cfg.sr, cfg.holdout]),
        };
        config_hash(&section)
    }
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn hashes(root: &Path, files: &[&str]) -> std::io::Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| Ok((f.to_string(), file_hash(&root.join(f))?)))
        .collect()
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub vae: ToyVae,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Self {
        Self {
            cfg,
            out,
            vae: ToyVae::default(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn manifest_path(&self) -> PathBuf {
        self.out.join("manifest.json")
    }

    pub fn load_manifest(&self) -> anyhow::Result<Manifest> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(Manifest::default());
        }
        serde_json::from_str(&fs::read_to_string(&p)?).context("parsing manifest")
    }

    fn save_manifest(&self, m: &Manifest) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.manifest_path(), serde_json::to_string_pretty(m)?)?;
        Ok(())
    }

    /// True when the manifest shows `stage` ran with the current config and
    /// inputs and its outputs are unchanged on disk.
    pub fn is_current(&self, stage: Stage) -> anyhow::Result<bool> {
        let m = self.load_manifest()?;
        let Some(rec) = m.stages.get(stage.name()) else {
            return Ok(false);
        };
        if rec.config_hash != stage.config_hash(&self.cfg)? {
            return Ok(false);
        }
        let all_exist = |files: &[&str]| files.iter().all(|f| self.path(f).exists());
        if !all_exist(stage.inputs()) || !all_exist(stage.outputs()) {
            return Ok(false);
        }
        Ok(hashes(&self.out, stage.inputs())? == rec.inputs && hashes(&self.out, stage.outputs())? == rec.outputs)
    }

    /// Runs one stage and records it in the manifest.
    pub fn run_stage(&self, stage: Stage) -> anyhow::Result<()> {
        for f in stage.inputs() {
            if !self.path(f).exists() {
                return Err(anyhow!("missing input {f}; run the stage that produces it first"));
            }
        }
        let inputs = hashes(&self.out, stage.inputs())?;
        match stage {
            Stage::GenCorpus => self.gen_corpus(),
            Stage::Filter => self.filter(),
            Stage::Train => self.train(),
            Stage::Sft => self.sft(),
            Stage::DpoPairs => self.dpo_pairs(),
            Stage::DpoTrain => self.dpo_train(),
            Stage::Eval => self.eval(),
            Stage::SrTrain => self.sr_train(),
        }
        .with_context(|| format!("stage {} failed", stage.name()))?;
        let mut m = self.load_manifest()?;
        m.seed = self.cfg.seed;
        m.config = serde_json::to_value(&self.cfg)?;
        m.stages.insert(
            stage.name().to_string(),
            StageRecord {
                config_hash: stage.config_hash(&self.cfg)?,
                inputs,
                outputs: hashes(&self.out, stage.outputs())?,
            },
        );
        self.save_manifest(&m)
    }

    /// Runs the pipeline, returning `(stage, ran)` for each stage. Once a stage
    /// runs, every later stage runs too.
    pub fn pipeline(&self) -> anyhow::Result<Vec<(Stage, bool)>> {
        let mut out = Vec::new();
        let mut dirty = false;
        for stage in PIPELINE {
            let run = dirty || !self.is_current(stage)?;
            if run {
                log::info!("running {}", stage.name());
                self.run_stage(stage)?;
                dirty = true;
            } else {
                log::info!("{} is up to date", stage.name());
            }
            out.push((stage, run));
        }
        Ok(out)
    }

    fn write_json<T: Serialize>(&self, rel: &str, v: &T) -> anyhow::Result<()> {
        let p = self.path(rel);
        if let Some(d) = p.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(p, serde_json::to_string_pretty(v)?)?;
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> anyhow::Result<T> {
        let text = fs::read_to_string(self.path(rel)).with_context(|| format!("reading {rel}"))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {rel}"))
    }

    fn gen_corpus(&self) -> anyhow::Result<()> {
        let corpus = build_corpus(&self.cfg.corpus)?;
        self.write_json(
            CORPUS_MANIFEST,
            &json!({ "config": self.cfg.corpus, "entries": corpus.entries }),
        )?;
        let mut f = TensorFile::default();
        for (e, v) in corpus.entries.iter().zip(&corpus.videos) {
            f.tensors.push((
                format!("video{}", e.id),
                v.frames().clone().into_dyn(),
                json!({ "fps": v.fps }),
            ));
        }
        f.save(&self.path(CORPUS_VIDEOS))?;
        Ok(())
    }

    pub fn load_corpus(&self) -> anyhow::Result<Corpus> {
        let m: Value = self.read_json(CORPUS_MANIFEST)?;
        let entries: Vec<CorpusEntry> = serde_json::from_value(m["entries"].clone())?;
        let f = TensorFile::load(&self.path(CORPUS_VIDEOS))?;
        if f.tensors.len() != entries.len() {
            return Err(anyhow!(
                "corpus has {} entries but {} videos",
                entries.len(),
                f.tensors.len()
            ));
        }
        let videos = f
            .tensors
            .into_iter()
            .map(|(_, t, meta)| {
                let fps = meta.get("fps").and_then(Value::as_f64).unwrap_or(8.0);
                // Stored as f32; clamp guards rounding at the range ends.
                PixelVideo::new(io::into4(t)?.mapv(|v| v.clamp(0.0, 1.0)), fps)
            })
            .collect::<crate::Result<Vec<_>>>()?;
        Ok(Corpus { entries, videos })
    }

    fn filter(&self) -> anyhow::Result<()> {
        let corpus = self.load_corpus()?;
        let reports = filter_corpus(&corpus.videos, &self.cfg.filter)?;
        let kept = corpus.kept_ids(&reports);
        self.write_json(
            FILTER_REPORT,
            &json!({ "thresholds": self.cfg.filter, "kept": kept, "reports": reports }),
        )
    }

    /// Kept ids split into training and held-out parts.
    pub fn split(&self) -> anyhow::Result<(Vec<usize>, Vec<usize>)> {
        let m: Value = self.read_json(FILTER_REPORT)?;
        let _: Vec<FilterReport> = serde_json::from_value(m["reports"].clone())?;
        let kept: Vec<usize> = serde_json::from_value(m["kept"].clone())?;
        if kept.len() <= self.cfg.holdout {
            return Err(anyhow!(
                "only {} clips kept, fewer than the holdout of {} plus one",
                kept.len(),
                self.cfg.holdout
            ));
        }
        let cut = kept.len() - self.cfg.holdout;
        Ok((kept[..cut].to_vec(), kept[cut..].to_vec()))
    }

    fn train(&self) -> anyhow::Result<()> {
        let corpus = self.load_corpus()?;
        let (train_ids, _) = self.split()?;
        let clips = corpus.training_clips(&self.vae, &train_ids)?;
        let p0 = ModelParams::init(&self.cfg.model, self.stage_seed(10))?;
        let out = dit::train(&p0, &self.cfg.model, &self.vae, &clips, &self.cfg.train)?;
        io::save_checkpoint(&self.path(BASE_CKPT), &self.cfg.model, &out.params)?;
        self.write_json(BASE_LOSSES, &out.losses)
    }

    fn stage_seed(&self, i: u64) -> u64 {
        self.cfg.stage_seed(i)
    }

    fn sft(&self) -> anyhow::Result<()> {
        let corpus = self.load_corpus()?;
        let (train_ids, _) = self.split()?;
        let mut ids: Vec<usize> = train_ids
            .iter()
            .copied()
            .filter(|&i| corpus.entries[i].has_tag(HIGH_DYNAMICS))
            .collect();
        if ids.is_empty() {
            log::warn!("no high-dynamics clips in the training split; using all of it");
            ids = train_ids;
        }
        let clips = corpus.training_clips(&self.vae, &ids)?;
        let (cfg, base) = io::load_checkpoint(&self.path(BASE_CKPT))?;
        let out = dit::train(&base, &cfg, &self.vae, &clips, &self.cfg.sft)?;
        io::save_checkpoint(&self.path(SFT_CKPT), &cfg, &out.params)?;
        self.write_json(SFT_LOSSES, &out.losses)
    }

    fn first_frame_prompts(
        &self,
        corpus: &Corpus,
        ids: &[usize],
        n: usize,
        grid_hw: (usize, usize),
    ) -> anyhow::Result<Vec<(Timeline, PairPrompt)>> {
        if ids.is_empty() {
            return Err(anyhow!("no clips to build prompts from"));
        }
        (0..n)
            .map(|i| {
                let id = ids[i % ids.len()];
                let v = &corpus.videos[id];
                let style = corpus.entries[id].spec.style;
                let tl = Timeline::new(v.len(), style).with(ConditionSpec::image(0, v.frame(0).to_owned())?);
                let layout = image_layout(&tl, &self.vae, grid_hw)?;
                Ok((
                    tl,
                    PairPrompt {
                        layout,
                        prompt: vec![style],
                    },
                ))
            })
            .collect()
    }

    fn dpo_pairs(&self) -> anyhow::Result<()> {
        let corpus = self.load_corpus()?;
        let (train_ids, _) = self.split()?;
        let (cfg, policy) = io::load_checkpoint(&self.path(SFT_CKPT))?;
        let d = &self.cfg.dpo;
        let mut pairs = Vec::new();
        if d.pipelines.contains(&PairPipeline::AbruptCuts) {
            let prompts: Vec<PairPrompt> = self
                .first_frame_prompts(&corpus, &train_ids, d.prompts, (cfg.grid[1], cfg.grid[2]))?
                .into_iter()
                .map(|(_, p)| p)
                .collect();
            pairs.extend(build_pairs_pipeline_a(
                &policy,
                &cfg,
                &prompts,
                d.group,
                SamplerOptions::steps(d.sampler_steps),
                self.stage_seed(20),
            )?);
        }
        if d.pipelines.contains(&PairPipeline::SubjectMotion) {
            pairs.extend(build_pairs_pipeline_b(&corpus, &self.vae)?);
        }
        for (i, p) in pairs.iter_mut().enumerate() {
            p.id = i;
        }
        log::info!("built {} preference pairs", pairs.len());
        save_pairs(&self.path(PAIRS), &pairs)?;
        Ok(())
    }

    fn dpo_train(&self) -> anyhow::Result<()> {
        let (cfg, reference) = io::load_checkpoint(&self.path(SFT_CKPT))?;
        let pairs = load_pairs(&self.path(PAIRS))?;
        let out = dpo_train(
            &reference,
            &reference,
            &cfg,
            &self.cfg.dpo.objective,
            &pairs,
            &self.cfg.dpo.train,
        )?;
        io::save_checkpoint(&self.path(DPO_CKPT), &cfg, &out.params)?;
        self.write_json(DPO_LOSSES, &out.losses)
    }

    fn eval(&self) -> anyhow::Result<()> {
        let corpus = self.load_corpus()?;
        let (_, held) = self.split()?;
        let (cfg, pre) = io::load_checkpoint(&self.path(SFT_CKPT))?;
        let (_, post) = io::load_checkpoint(&self.path(DPO_CKPT))?;
        let prompts = self.first_frame_prompts(&corpus, &held, self.cfg.eval.samples, (cfg.grid[1], cfg.grid[2]))?;
        let opts = SamplerOptions::steps(self.cfg.eval.sampler_steps);
        let hash = self.cfg_hash_for(Stage::Eval)?;
        let mut report = EvalReport::default();
        for (tag, params) in [("pre", &pre), ("post", &post)] {
            let mut psnr = Vec::new();
            let mut cuts = Vec::new();
            let mut steps = Vec::new();
            for (i, (tl, p)) in prompts.iter().enumerate() {
                let z = dit::generate(
                    params,
                    &cfg,
                    &p.layout,
                    &p.prompt,
                    opts,
                    derive(self.stage_seed(30), i as u64),
                )?;
                let video = decode(&self.vae, &z, tl.total_frames)?;
                psnr.push(condition_psnr(&video, tl)?[0]);
                cuts.push(cut_severity(&z)?);
                steps.push(max_centroid_step(&estimate_centroids(&video)));
            }
            report.add_metric(&format!("condition_psnr/{tag}"), &psnr, &hash)?;
            report.add_metric(&format!("cut_severity/{tag}"), &cuts, &hash)?;
            report.add_metric(&format!("max_centroid_step/{tag}"), &steps, &hash)?;
        }
        for m in ["condition_psnr", "cut_severity", "max_centroid_step"] {
            report.compare(m, &format!("{m}/pre"), &format!("{m}/post"))?;
        }
        fs::create_dir_all(self.path("eval"))?;
        report.write_json(&self.path(EVAL_JSON))?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        fs::write(self.path(EVAL_CSV), csv)?;
        Ok(())
    }

    fn cfg_hash_for(&self, stage: Stage) -> anyhow::Result<String> {
        Ok(stage.config_hash(&self.cfg)?)
    }

    fn sr_train(&self) -> anyhow::Result<()> {
        let s = &self.cfg.sr;
        let corpus = self.load_corpus()?;
        let (train_ids, _) = self.split()?;
        let hi = ToyVae::new(s.patch, self.vae.stride, self.vae.posterior_std)?;
        let clips = corpus
            .training_clips(&self.vae, &train_ids)?
            .iter()
            .map(|c| sr_training_clip(c, &hi, s.pool, s.frames))
            .collect::<crate::Result<Vec<_>>>()?;
        let p0 = ModelParams::init(&s.model.model, self.stage_seed(40))?;
        let out = sr_train(&p0, &s.model, &hi, &clips, &s.train, &s.shift)?;
        io::save_params(
            &self.path(SR_CKPT),
            json!({ "sr": s.model, "patch": s.patch }),
            &out.params,
        )?;
        self.write_json(SR_LOSSES, &out.losses)
    }

    pub fn generate(&self, timeline: &Path, checkpoint: &Path, dest: &Path, fusion: Fusion) -> anyhow::Result<()> {
        let tl = io::load_timeline(timeline)?;
        let (cfg, params) = io::load_checkpoint(checkpoint)?;
        let sar = SarConfig {
            max_len: cfg.grid[0],
            tail: self.cfg.sar.tail,
            fusion,
            sampler_steps: cfg.sampler_steps,
        };
        let tc = self.vae.compression(tl.total_frames)?;
        let mut snapped = tl.clone();
        snapped.snap(&tc)?;
        let gen = generate_long(&params, &cfg, &tl, &self.vae, &sar, self.stage_seed(50))?;
        let route = if gen.plan.segments.len() == 1 {
            "single"
        } else {
            "segmented"
        };
        log::info!("{route} generation over {} latent frames", tc.latent_len());
        if !gen.latent.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("generated latent".into()).into());
        }
        let mut mask = Array1::<f64>::zeros(tc.latent_len());
        for c in &snapped.conditions {
            let (f, l) = c.latent_extent(&tc)?;
            for k in f..=l {
                mask[k] = 1.0;
            }
        }
        fs::create_dir_all(dest)?;
        let latent = LatentVideo::new(gen.latent.clone(), tc, self.vae.patch)?;
        io::save_latent(&dest.join("latent.dmt"), &latent)?;
        let video = decode(&self.vae, &gen.latent, tl.total_frames)?;
        io::export_frames(&dest.join("frames"), &video)?;
        let plan = json!({
            "route": route,
            "total_frames": tl.total_frames,
            "latent_len": tc.latent_len(),
            "anchors": snapped.conditions.iter().map(|c| c.anchor_frame).collect::<Vec<_>>(),
            "mask": mask.to_vec(),
            "plan": gen.plan,
            "fusion": fusion,
        });
        fs::write(dest.join("plan.json"), serde_json::to_string_pretty(&plan)?)?;
        Ok(())
    }

    pub fn super_resolve(&self, latent: &Path, timeline: &Path, checkpoint: &Path, dest: &Path) -> anyhow::Result<()> {
        let (meta, params) = io::load_params(checkpoint)?;
        let cfg: SrConfig = serde_json::from_value(meta["sr"].clone()).context("SR checkpoint lacks its config")?;
        params.check_layout(&cfg.model)?;
        let patch = meta["patch"]
            .as_u64()
            .ok_or_else(|| anyhow!("SR checkpoint lacks its patch size"))? as usize;
        let hi = ToyVae::new(patch, self.vae.stride, self.vae.posterior_std)?;
        let low = io::load_latent(latent)?;
        let tl = io::load_timeline(timeline)?;
        let (t, h, w) = low.grid();
        let (hh, ww) = (h * cfg.upscale, w * cfg.upscale);
        let layout = crate::conditioning::build_layout(
            &tl,
            &hi,
            (hh, ww),
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(self.stage_seed(61)),
        )?;
        if layout.grid().0 != t {
            return Err(anyhow!(
                "timeline spans {} latent frames, low-res latent {t}",
                layout.grid().0
            ));
        }
        let z = sr_generate(
            &params,
            &cfg,
            &low.data,
            &layout,
            &[tl.prompt_id],
            cfg.model.sampler_steps,
            self.stage_seed(60),
        )?;
        fs::create_dir_all(dest)?;
        let out = LatentVideo::new(z.clone(), low.tc, patch)?;
        io::save_latent(&dest.join("latent.dmt"), &out)?;
        io::export_frames(&dest.join("frames"), &decode(&hi, &z, tl.total_frames)?)?;
        Ok(())
    }
}

/// Decodes a latent to `[0, 1]` pixels; decoded values outside the range are
/// clamped.
pub fn decode(vae: &ToyVae, z: &ndarray::Array4<f64>, pixel_len: usize) -> crate::Result<PixelVideo> {
    let tc = vae.compression(pixel_len)?;
    let clamped = z.mapv(|v| v.clamp(0.0, 1.0));
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("latent to decode".into()));
    }
    vae.decode(&LatentVideo::new(clamped, tc, vae.patch)?, pixel_len)
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    id: usize,
    pipeline: PairPipeline,
    prompt: Vec<usize>,
    scores: (f64, f64),
    mask: Vec<f64>,
    rope_anchors: Vec<RopeAnchor>,
}

pub fn save_pairs(path: &Path, pairs: &[PreferencePair]) -> crate::Result<()> {
    let mut f = TensorFile::default();
    let mut meta = Vec::with_capacity(pairs.len());
    for p in pairs {
        f.push(&format!("{}.winner", p.id), p.winner.clone().into_dyn());
        f.push(&format!("{}.loser", p.id), p.loser.clone().into_dyn());
        f.push(&format!("{}.cond", p.id), p.layout.cond.clone().into_dyn());
        meta.push(PairMeta {
            id: p.id,
            pipeline: p.pipeline,
            prompt: p.prompt.clone(),
            scores: p.scores,
            mask: p.layout.mask.to_vec(),
            rope_anchors: p.layout.rope_anchors.clone(),
        });
    }
    f.meta = json!({ "pairs": meta });
    f.save(path)
}

pub fn load_pairs(path: &Path) -> crate::Result<Vec<PreferencePair>> {
    let f = TensorFile::load(path)?;
    let meta: Vec<PairMeta> = serde_json::from_value(f.meta["pairs"].clone())?;
    let get = |name: String| {
        f.get(&name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("pair file lacks `{name}`")))
            .and_then(io::into4)
    };
    meta.into_iter()
        .map(|m| {
            Ok(PreferencePair {
                id: m.id,
                pipeline: m.pipeline,
                layout: ConditionLayout {
                    cond: get(format!("{}.cond", m.id))?,
                    mask: Array1::from(m.mask),
                    rope_anchors: m.rope_anchors,
                },
                prompt: m.prompt,
                winner: get(format!("{}.winner", m.id))?,
                loser: get(format!("{}.loser", m.id))?,
                scores: m.scores,
            })
        })
        .collect()
}

/// Writes a ready-to-use example timeline: one image condition per anchor,
/// taken from corpus clip `id`.
pub fn example_timeline(
    corpus: &Corpus,
    id: usize,
    total_frames: usize,
    anchors: &[usize],
    path: &Path,
) -> crate::Result<()> {
    let v = &corpus.videos[id];
    let mut tl = Timeline::new(total_frames, corpus.entries[id].spec.style);
    for &a in anchors {
        tl.conditions
            .push(ConditionSpec::image(a, v.frame(a.min(v.len() - 1)).to_owned())?);
    }
    io::save_timeline(path, &tl)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| anyhow!("configuring {n} threads: {e}"))?;
    }
    if let Command::Config { smoke } = cli.command {
        let base = if smoke {
            RunConfig::smoke()
        } else {
            RunConfig::default()
        };
        let cfg = match &cli.global.config {
            Some(_) => load_config(cli.global.config.as_deref(), cli.global.seed)?,
            None => base.clone().with_seed(cli.global.seed.unwrap_or(base.seed)),
        };
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let cfg = load_config(cli.global.config.as_deref(), cli.global.seed)?;
    let ctx = Ctx::new(cfg, cli.global.out.clone());
    match cli.command {
        Command::Config { .. } => unreachable!("handled above"),
        Command::GenCorpus => ctx.run_stage(Stage::GenCorpus),
        Command::Filter => ctx.run_stage(Stage::Filter),
        Command::Train => ctx.run_stage(Stage::Train),
        Command::Sft => ctx.run_stage(Stage::Sft),
        Command::DpoPairs => ctx.run_stage(Stage::DpoPairs),
        Command::DpoTrain => ctx.run_stage(Stage::DpoTrain),
        Command::Eval => ctx.run_stage(Stage::Eval),
        Command::SrTrain => ctx.run_stage(Stage::SrTrain),
        Command::Timeline {
            path,
            clip,
            frames,
            anchors,
        } => {
            let corpus = ctx.load_corpus()?;
            if clip >= corpus.videos.len() {
                return Err(anyhow!("corpus has {} clips, no clip {clip}", corpus.videos.len()));
            }
            Ok(example_timeline(&corpus, clip, frames, &anchors, &path)?)
        }
        Command::Pipeline => {
            for (stage, ran) in ctx.pipeline()? {
                println!("{} {}", if ran { "ran" } else { "skipped" }, stage.name());
            }
            Ok(())
        }
        Command::Generate {
            timeline,
            checkpoint,
            dest,
            fusion,
        } => {
            let dest = dest.unwrap_or_else(|| ctx.out.join("generate"));
            ctx.generate(&timeline, &checkpoint, &dest, fusion.into())
        }
        Command::Sr {
            latent,
            timeline,
            checkpoint,
            dest,
        } => {
            let dest = dest.unwrap_or_else(|| ctx.out.join("sr"));
            ctx.super_resolve(&latent, &timeline, &checkpoint, &dest)
        }
    }
}

/// Process exit code for an error: 2 schema, 3 layout conflict, 4 non-finite
/// output, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Schema { .. } => 2,
                Error::LayoutConflict { .. } => 3,
                Error::NonFinite(_) | Error::Divergence { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

/// Dims of a tensor as stored, for quick inspection in tests and tools.
pub fn tensor_dims(path: &Path) -> crate::Result<Vec<usize>> {
    Ok(io::load_tensor(path)?.shape().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        for cfg in [RunConfig::default(), RunConfig::smoke().with_seed(9)] {
            let text = serde_json::to_string(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
        let partial: RunConfig = serde_json::from_str(r#"{"holdout": 5}"#).unwrap();
        assert_eq!(partial.holdout, 5);
        assert_eq!(partial.model, DitConfig::default());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let a = RunConfig::default().with_seed(1);
        let b = RunConfig::default().with_seed(2);
        assert_ne!(a.corpus.seed, b.corpus.seed);
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.dpo.train.seed, b.dpo.train.seed);
        assert_ne!(a.sr.train.seed, b.sr.train.seed);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let schema: anyhow::Error = Error::Schema {
            field: "total_frames".into(),
            reason: "missing".into(),
        }
        .into();
        assert_eq!(exit_code(&schema.context("loading timeline")), 2);
        let conflict: anyhow::Error = Error::LayoutConflict {
            segment: None,
            details: String::new(),
        }
        .into();
        assert_eq!(exit_code(&conflict), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into()).into()), 4);
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }

    #[test]
    fn pairs_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut layout = ConditionLayout::empty(3, 2, 2);
        layout.mask[0] = 1.0;
        layout.cond.fill(0.5);
        let pair = PreferencePair {
            id: 0,
            pipeline: PairPipeline::SubjectMotion,
            layout,
            prompt: vec![3],
            winner: ndarray::Array4::from_elem((3, 2, 2, 3), 0.25),
            loser: ndarray::Array4::from_elem((3, 2, 2, 3), 0.75),
            scores: (1.0, 9.0),
        };
        let p = dir.path().join("pairs.dmt");
        save_pairs(&p, std::slice::from_ref(&pair)).unwrap();
        assert_eq!(load_pairs(&p).unwrap(), vec![pair]);
    }
}
