//! Run configuration, hashing, and the resumable training loop shared by the
//! command line and the acceptance harness.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{load_checkpoint, save_checkpoint, DiffusionBatch, DropoutConfig, ModelConfig, TextSrModel, Trainer, TrainingPair};
use crate::geometry::{read_jsonl, resize_to_height, BLEND_SIGMA, TILE_OVERLAP};
use crate::guidance::GuidanceConfig;
use crate::nn::AdamConfig;
use crate::parallel::par_map;
use crate::pipeline::PipelineConfig;
use crate::rng::{keyed_rng, stage};
use crate::synth::{DatasetManifest, DatasetSpec};
use crate::{Error, ImagePlane, Result};

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Seeds initialization, batch selection and noise.
    pub seed: u64,
    pub dropout: DropoutConfig,
    pub optimizer: AdamConfig,
    pub checkpoint_every: u64,
    /// Window of the moving average used to judge convergence.
    pub smoothing_window: usize,
    /// Restarts from the last checkpoint (at half the learning rate) after a
    /// non-finite loss before giving up.
    pub max_retries: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 4,
            seed: 0,
            dropout: DropoutConfig::default(),
            optimizer: AdamConfig::default(),
            checkpoint_every: 250,
            smoothing_window: 100,
            max_retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub factor: usize,
    pub blend_sigma: f64,
    pub tile_overlap: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            factor: 2,
            blend_sigma: BLEND_SIGMA,
            tile_overlap: TILE_OVERLAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub omegas: Vec<f64>,
    pub rs: Vec<usize>,
    /// Guiding recognizer `ψ`: `toy`, `oracle:<rate>`, `cmd:<path>` or `none`.
    pub ocr: String,
    /// Recognizer that scores restored crops.
    pub evaluator: String,
    pub limit: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            omegas: vec![0.5, 1.0],
            rs: vec![0, 1, 2],
            ocr: "toy".into(),
            evaluator: "toy".into(),
            limit: None,
        }
    }
}

/// Every knob of an experiment in one JSON document. Paths are given on the
/// command line and are not part of the document or its hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub training: TrainingConfig,
    pub guidance: GuidanceConfig,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: RUN_SCHEMA_VERSION,
            model: ModelConfig::desk(),
            dataset: DatasetSpec::default(),
            training: TrainingConfig::default(),
            guidance: GuidanceConfig::default(),
            pipeline: PipelineSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} (expected {RUN_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.dataset.degradation.validate()?;
        self.guidance.validate()?;
        crate::pipeline::check_factor(self.pipeline.factor)?;
        if 2 * self.pipeline.tile_overlap >= self.model.denoiser.width {
            return Err(Error::Config(format!(
                "tile_overlap {} must be under half the model width {}",
                self.pipeline.tile_overlap, self.model.denoiser.width
            )));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.training.smoothing_window == 0 {
            return Err(Error::Config("smoothing_window must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn pipeline_config(&self, workers: usize) -> PipelineConfig {
        PipelineConfig {
            factor: self.pipeline.factor,
            tile_height: self.model.denoiser.height,
            tile_width: self.model.denoiser.width,
            tile_overlap: self.pipeline.tile_overlap,
            blend_sigma: self.pipeline.blend_sigma,
            workers,
        }
    }
}

/// Resizes to line height `h`, converts to `c` channels and fits width `w`:
/// narrower lines are edge-padded, wider ones cut at `w`.
pub fn fit_line(img: &ImagePlane, h: usize, w: usize, c: usize) -> Result<ImagePlane> {
    let line = resize_to_height(img, h).to_channels(c)?;
    if line.width() <= w {
        Ok(line.pad_right_replicate(w))
    } else {
        line.crop_cols(0, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub step: u64,
    pub loss: f64,
}

/// Trailing moving average; entry `i` averages the last `window` losses up to `i`.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_jsonl(path, "loss log")
}

fn rewrite_loss_log(path: &Path, entries: &[LossEntry]) -> Result<()> {
    crate::geometry::write_jsonl(path, entries)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Total optimizer steps to reach (a resumed run continues up to it).
    pub steps: u64,
    pub out_ckpt: PathBuf,
    pub log_path: PathBuf,
    pub resume: Option<PathBuf>,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub final_step: u64,
    pub retries: u32,
    pub last_loss: Option<f64>,
}

/// The `(lr, hr, text)` triplets of one step, fitted to the model line.
fn load_batch(data: &DatasetManifest, cfg: &RunConfig, step: u64, workers: usize) -> Result<Vec<(ImagePlane, ImagePlane, String)>> {
    let mut rng = keyed_rng(cfg.training.seed, step, stage::TRAIN_BATCH);
    let picks: Vec<usize> = (0..cfg.training.batch_size).map(|_| rng.random_range(0..data.records.len())).collect();
    let d = &cfg.model.denoiser;
    par_map(&picks, workers, |_, &i| {
        let rec = &data.records[i];
        let (lr, hr) = data.load_pair(rec)?;
        Ok((
            fit_line(&lr, d.height, d.width, d.image_channels)?,
            fit_line(&hr, d.height, d.width, d.image_channels)?,
            rec.text.clone(),
        ))
    })
    .into_iter()
    .collect()
}

/// One optimizer update at global step `step` (0-based).
pub fn train_step(trainer: &mut Trainer<f32>, data: &DatasetManifest, cfg: &RunConfig, step: u64, workers: usize) -> Result<f64> {
    let triplets = load_batch(data, cfg, step, workers)?;
    let pairs: Vec<TrainingPair<'_>> = triplets.iter().map(|(lr, hr, text)| TrainingPair { lr, hr, text }).collect();
    let batch = DiffusionBatch::sample(
        &pairs,
        &trainer.model.schedule,
        cfg.training.dropout,
        cfg.model.text.max_len,
        cfg.training.seed,
        step,
    )?;
    trainer.step(&batch)
}

/// Trains up to `opts.steps`, logging every step to a JSONL loss log and
/// writing checkpoints atomically.
///
/// Batches depend only on `(seed, step)`, and checkpoints carry optimizer
/// state, so a resumed run retraces an uninterrupted one. On resume or
/// retry the log is cut back to the checkpoint step, leaving no gaps or
/// duplicates.
pub fn train(cfg: &RunConfig, data: &DatasetManifest, opts: &TrainOptions, mut progress: impl FnMut(u64, f64)) -> Result<TrainSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    if data.records.is_empty() && opts.steps > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut trainer = match &opts.resume {
        Some(p) => {
            let ck = load_checkpoint::<f32>(p)?;
            ck.expect_config(&cfg.model)?;
            let opt = ck.optimizer.ok_or_else(|| Error::ArtifactMismatch("checkpoint has no optimizer state".into()))?;
            Trainer {
                model: ck.model,
                optimizer: opt,
            }
        }
        None => Trainer::new(TextSrModel::<f32>::new(cfg.model.clone(), cfg.training.seed)?, cfg.training.optimizer),
    };
    let start_step = trainer.model.step;
    let mut log = read_loss_log(&opts.log_path)?;
    if opts.resume.is_none() {
        log.clear();
    }
    log.retain(|e| e.step < start_step);
    rewrite_loss_log(&opts.log_path, &log)?;
    save_checkpoint(&opts.out_ckpt, &trainer.model, Some(&trainer.optimizer), Some(&hash))?;
    let mut last_good = trainer.clone();
    let mut retries = 0;
    let mut last_loss = None;
    let mut writer = open_append(&opts.log_path)?;
    let mut step = trainer.model.step;
    while step < opts.steps {
        match train_step(&mut trainer, data, cfg, step, opts.workers) {
            Ok(loss) => {
                let line = serde_json::to_string(&LossEntry { step, loss }).expect("entry serializes");
                writeln!(writer, "{line}").map_err(|e| Error::io(&opts.log_path, e))?;
                progress(step, loss);
                last_loss = Some(loss);
                step += 1;
                if step % cfg.training.checkpoint_every.max(1) == 0 || step == opts.steps {
                    writer.flush().map_err(|e| Error::io(&opts.log_path, e))?;
                    save_checkpoint(&opts.out_ckpt, &trainer.model, Some(&trainer.optimizer), Some(&hash))?;
                    last_good = trainer.clone();
                }
            }
            Err(Error::NonFiniteLoss) if retries < cfg.training.max_retries => {
                retries += 1;
                log::warn!("non-finite loss at step {step}; restarting from step {}", last_good.model.step);
                trainer = last_good.clone();
                trainer.optimizer.config.lr /= 2.0;
                step = trainer.model.step;
                drop(writer);
                let mut kept = read_loss_log(&opts.log_path)?;
                kept.retain(|e| e.step < step);
                rewrite_loss_log(&opts.log_path, &kept)?;
                writer = open_append(&opts.log_path)?;
            }
            Err(e) => return Err(e),
        }
    }
    writer.flush().map_err(|e| Error::io(&opts.log_path, e))?;
    Ok(TrainSummary {
        start_step,
        final_step: step,
        retries,
        last_loss,
    })
}

fn open_append(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}
