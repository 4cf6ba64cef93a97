//! Finetuning loop: Min-SNR weighted denoising loss plus the auxiliary
//! terms, Adam updates, validation, checkpoints and a JSON-lines loss log.

pub mod ablation;
mod adam;
mod config;

pub use adam::{Adam, AdamParams};
pub use config::{DataConfig, TermSwitches, TrainConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, TrainingSample};
use crate::diffusion::checkpoint::{
    load_blob, load_checkpoint, save_checkpoint, shapes_of, CheckpointMeta, FORMAT_VERSION,
};
use crate::diffusion::{base_loss, gaussian, predict_x0, reverse_sample, Backbone, VarianceSchedule};
use crate::error::{Error, Result};
use crate::eval::clip_visual_similarity;
use crate::image::Image;
use crate::supervision::{
    build_encoder, combined_loss, edge_loss, info_nce_loss, perceptual_loss, sample_negatives, FeatureEncoder,
    LossTerms, PoolEntry, SimilarityBatch, TermValues,
};

pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";

const STREAM_NOISE: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;

/// min(SNR(t), γ) / SNR(t) with SNR(t) = ᾱ_t / (1 − ᾱ_t).
pub fn min_snr_weight(t: usize, schedule: &VarianceSchedule, gamma: f64) -> Result<f64> {
    schedule.check_t(t)?;
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("snr gamma must be > 0, got {gamma}")));
    }
    let ab = schedule.alpha_bar(t);
    if ab <= 0.0 || ab >= 1.0 {
        return Err(Error::Singularity(format!("alpha_bar = {ab} at t={t}")));
    }
    let snr = ab / (1.0 - ab);
    Ok(snr.min(gamma) / snr)
}

/// Per-step RNG: one ChaCha stream per (step, purpose) under the run seed.
fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(4).wrapping_add(purpose));
    rng
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    pub sum: f64,
    pub count: u64,
}

impl RunningMean {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.count += 1;
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningAverages {
    pub sd: RunningMean,
    pub text: RunningMean,
    pub edge: RunningMean,
    pub perceptual: RunningMean,
    pub total: RunningMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngSnapshot {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngSnapshot {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::Checkpoint(format!("bad rng state: {m}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|e| bad(&e.to_string()))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

/// Mutable loop state. The data-order RNG is the only stateful generator;
/// per-step noise and negatives derive from (seed, step).
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub data_rng: ChaCha8Rng,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub running: RunningAverages,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: u64,
    data_rng: RngSnapshot,
    order: Vec<usize>,
    cursor: usize,
    running: RunningAverages,
}

impl TrainState {
    pub fn new(seed: u64, samples: usize) -> Self {
        let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(&mut data_rng);
        Self {
            step: 0,
            data_rng,
            order,
            cursor: 0,
            running: RunningAverages::default(),
        }
    }

    /// Next `n` sample indices, reshuffling at epoch boundaries.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !self.order.is_empty() {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.data_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(StateFile {
            step: self.step,
            data_rng: RngSnapshot::capture(&self.data_rng),
            order: self.order.clone(),
            cursor: self.cursor,
            running: self.running,
        })?)
    }

    fn from_json(v: &serde_json::Value) -> Result<Self> {
        let f: StateFile = serde_json::from_value(v.clone())?;
        Ok(Self {
            step: f.step,
            data_rng: f.data_rng.restore()?,
            order: f.order,
            cursor: f.cursor,
            running: f.running,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub sd: f64,
    pub text: Option<f64>,
    pub edge: Option<f64>,
    pub perceptual: Option<f64>,
    pub total: f64,
    pub min_snr_mean_weight: f64,
    #[serde(default)]
    pub text_skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub clip_vs: f64,
    pub prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Train(StepRecord),
    Validation(ValidationRecord),
}

impl LogRecord {
    pub fn step(&self) -> u64 {
        match self {
            LogRecord::Train(r) => r.step,
            LogRecord::Validation(r) => r.step,
        }
    }
}

/// Read-only pieces shared by every step.
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub backbone: &'a Backbone,
    pub schedule: &'a VarianceSchedule,
    pub encoder: &'a dyn FeatureEncoder,
    pub pool: &'a [PoolEntry],
}

/// Distinct (name, era) pairs of the training set, the negative pool.
pub fn negative_pool(samples: &[TrainingSample]) -> Vec<PoolEntry> {
    let set: BTreeSet<(String, String)> = samples.iter().map(|s| (s.name.clone(), s.period_key.clone())).collect();
    set.into_iter()
        .map(|(name, period_key)| PoolEntry { name, period_key })
        .collect()
}

fn param_dtype(backbone: &Backbone) -> DType {
    backbone
        .trainable_vars()
        .values()
        .next()
        .map(|v| v.dtype())
        .unwrap_or(DType::F32)
}

fn text_term(ctx: &StepContext, batch: &[&TrainingSample], step: u64) -> Result<Option<Tensor>> {
    let negatives = ctx.config.contrastive_candidates - 1;
    let mut rng = step_rng(ctx.config.seed, step, STREAM_NEGATIVES);
    let mut names = Vec::with_capacity(batch.len() * (negatives + 1));
    let mut periods = Vec::with_capacity(batch.len());
    for s in batch {
        let negs = match sample_negatives(&s.period_key, ctx.pool, negatives, rng.next_u64()) {
            Ok(n) => n,
            Err(e @ Error::InsufficientNegatives { .. }) => {
                warn!("step {step}: skipping text term for {}: {e}", s.record_id);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        names.push(s.name.clone());
        let mut p = vec![s.period_key.clone()];
        for n in negs {
            names.push(n.name);
            p.push(n.period_key);
        }
        periods.push(p);
    }
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let enc = ctx.backbone.text_encoder.as_ref();
    let descriptions: Vec<&str> = batch.iter().map(|s| s.description.as_str()).collect();
    let anchors = enc.encode(&descriptions)?;
    let candidates = enc.encode(&names)?.reshape((batch.len(), negatives + 1, ()))?;
    let anchor_periods: Vec<String> = batch.iter().map(|s| s.period_key.clone()).collect();
    let sb = SimilarityBatch::new(anchors, candidates, vec![0; batch.len()], &anchor_periods, &periods)?;
    Ok(Some(info_nce_loss(&sb, ctx.config.temperature)?))
}

/// One update of the combined objective on `batch`. `state.step` is
/// advanced only when the update succeeds.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&TrainingSample],
    ctx: &StepContext,
    optimizer: &mut Adam,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty training batch".into()));
    }
    let cfg = ctx.config;
    if let Some(s) = batch
        .iter()
        .find(|s| s.image.height() != cfg.resolution || s.image.width() != cfg.resolution)
    {
        return Err(Error::ShapeMismatch(format!(
            "sample {} is {}x{}, expected {}",
            s.record_id,
            s.image.height(),
            s.image.width(),
            cfg.resolution
        )));
    }
    let step = state.step + 1;
    let dtype = param_dtype(ctx.backbone);
    let dev = Device::Cpu;
    let b = batch.len();

    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let real = Image::batch_to_tensor(&images, dtype, &dev)?;
    let z0 = ctx.backbone.autoencoder.encode(&real)?;
    let prompts: Vec<&str> = batch.iter().map(|s| s.prompt.as_str()).collect();
    let embedding = ctx.backbone.text_encoder.encode(&prompts)?;

    let mut rng = step_rng(cfg.seed, step, STREAM_NOISE);
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=ctx.schedule.timesteps())).collect();
    let noise = gaussian(&mut rng, z0.dims(), dtype, &dev)?;
    let base = base_loss(
        &z0,
        &embedding,
        &t,
        &noise,
        ctx.backbone.noise_predictor.as_ref(),
        ctx.schedule,
    )?;
    let weights = t
        .iter()
        .map(|&s| min_snr_weight(s, ctx.schedule, cfg.loss_weights.snr_gamma))
        .collect::<Result<Vec<_>>>()?;
    let sd = base.weighted_mean(&weights)?;

    let (text, text_skipped) = if cfg.terms.text {
        let t = text_term(ctx, batch, step)?;
        let skipped = t.is_none();
        (t, skipped)
    } else {
        (None, false)
    };

    let (edge, perceptual) = if cfg.terms.edge || cfg.terms.perceptual {
        let x0 = predict_x0(&base.noised, &base.predicted_noise, ctx.schedule)?;
        let generated = ctx.backbone.autoencoder.decode(&x0)?.clamp(0.0, 1.0)?;
        let edge = if cfg.terms.edge {
            Some(edge_loss(&real, &generated, &cfg.edge)?)
        } else {
            None
        };
        let perceptual = if cfg.terms.perceptual {
            Some(perceptual_loss(&real, &generated, ctx.encoder)?)
        } else {
            None
        };
        (edge, perceptual)
    } else {
        (None, None)
    };

    let combined = combined_loss(
        &LossTerms {
            sd,
            text,
            edge,
            perceptual,
        },
        &cfg.loss_weights,
    )?;
    let grads = combined.total.backward()?;
    optimizer.step(&grads)?;

    let TermValues {
        sd,
        text,
        edge,
        perceptual,
        total,
    } = combined.values;
    state.step = step;
    let r = &mut state.running;
    r.sd.push(Some(sd));
    r.text.push(text);
    r.edge.push(edge);
    r.perceptual.push(perceptual);
    r.total.push(Some(total));
    Ok(StepRecord {
        step,
        sd,
        text,
        edge,
        perceptual,
        total,
        min_snr_mean_weight: weights.iter().sum::<f64>() / b as f64,
        text_skipped,
    })
}

/// Mean CLIP-VS between samples generated from the first validation prompts
/// and their ground-truth images.
pub fn validate(
    samples: &[TrainingSample],
    config: &TrainConfig,
    backbone: &Backbone,
    schedule: &VarianceSchedule,
    encoder: &dyn FeatureEncoder,
) -> Result<f64> {
    let chosen = &samples[..samples.len().min(config.validation_prompts)];
    if chosen.is_empty() {
        return Err(Error::InvalidParameter("no validation samples".into()));
    }
    let prompts: Vec<&str> = chosen.iter().map(|s| s.prompt.as_str()).collect();
    let embedding = backbone.text_encoder.encode(&prompts)?.detach();
    let generated = Image::from_batch_tensor(&reverse_sample(
        &embedding,
        backbone,
        schedule,
        config.sample_steps,
        config.seed,
    )?)?;
    let mut sum = 0.0;
    for (g, s) in generated.iter().zip(chosen) {
        sum += clip_visual_similarity(g, &s.image, encoder)?;
    }
    Ok(sum / chosen.len() as f64)
}

pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<LogRecord>,
    pub state: TrainState,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step-{step:06}"))
}

fn write_checkpoint(
    dir: &Path,
    config: &TrainConfig,
    backbone: &Backbone,
    optimizer: &Adam,
    state: &TrainState,
) -> Result<()> {
    let params = backbone.snapshot()?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        step: state.step,
        schedule: config.schedule,
        backbone: config.backbone,
        shapes: shapes_of(&params),
        extra: serde_json::json!({
            "trainer": state.to_json()?,
            "config": serde_json::to_value(config)?,
        }),
    };
    save_checkpoint(dir, &meta, &params, &[(OPTIMIZER_FILE, &optimizer.state_tensors())])
}

/// Restores parameters, optimizer moments and loop state from a checkpoint.
pub fn restore(dir: &Path, backbone: &Backbone, optimizer: &mut Adam) -> Result<TrainState> {
    let ck = load_checkpoint(dir)?;
    backbone.load_params(&ck.params)?;
    let trainer = ck
        .meta
        .extra
        .get("trainer")
        .ok_or_else(|| Error::Checkpoint(format!("{} has no trainer state", dir.display())))?;
    let state = TrainState::from_json(trainer)?;
    if state.step != ck.meta.step {
        return Err(Error::Checkpoint("trainer step disagrees with checkpoint step".into()));
    }
    optimizer.load_state(&load_blob(dir, OPTIMIZER_FILE)?, state.step)?;
    Ok(state)
}

pub fn adam_params(config: &TrainConfig) -> AdamParams {
    AdamParams {
        lr: config.learning_rate,
        beta1: config.adam_betas[0],
        beta2: config.adam_betas[1],
        eps: config.adam_eps,
        weight_decay: config.weight_decay,
    }
}

struct LogWriter {
    out: BufWriter<File>,
    records: Vec<LogRecord>,
}

impl LogWriter {
    fn open(path: &Path, keep: Vec<LogRecord>) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            records: Vec::new(),
        };
        for r in keep {
            w.push(r, path)?;
        }
        Ok(w)
    }

    fn push(&mut self, r: LogRecord, path: &Path) -> Result<()> {
        serde_json::to_writer(&mut self.out, &r)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(path, e))?;
        self.records.push(r);
        Ok(())
    }
}

/// Runs `config.max_steps` steps (continuing from `resume` when given),
/// writing the loss log and checkpoints under `out_dir`.
pub fn fit(
    config: &TrainConfig,
    train: &[TrainingSample],
    val: &[TrainingSample],
    backbone: &Backbone,
    schedule: &VarianceSchedule,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidParameter("no training samples".into()));
    }
    if schedule.params() != config.schedule {
        return Err(Error::Config("schedule does not match the configuration".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let encoder: Arc<dyn FeatureEncoder> = build_encoder(&config.encoder, config.resolution, config.resolution)?;
    let pool = negative_pool(train);
    let mut optimizer = Adam::new(backbone.trainable_vars(), adam_params(config))?;

    let log_path = out_dir.join(LOSS_LOG_FILE);
    let (mut state, kept) = match resume {
        Some(dir) => {
            let state = restore(dir, backbone, &mut optimizer)?;
            if state.order.len() != train.len() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained on {} samples, got {}",
                    state.order.len(),
                    train.len()
                )));
            }
            let kept: Vec<LogRecord> = if log_path.exists() {
                read_jsonl::<LogRecord>(&log_path)?
                    .into_iter()
                    .filter(|r| r.step() <= state.step)
                    .collect()
            } else {
                Vec::new()
            };
            (state, kept)
        }
        None => (TrainState::new(config.seed, train.len()), Vec::new()),
    };
    let mut log = LogWriter::open(&log_path, kept)?;

    let ctx = StepContext {
        config,
        backbone,
        schedule,
        encoder: encoder.as_ref(),
        pool: &pool,
    };
    let mut checkpoints = Vec::new();
    while state.step < config.max_steps {
        let idx = state.next_batch(config.batch_size);
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &train[i]).collect();
        let record = train_step(&mut state, &batch, &ctx, &mut optimizer)?;
        log.push(LogRecord::Train(record), &log_path)?;
        let step = state.step;
        if config.eval_every > 0 && step % config.eval_every == 0 {
            if val.is_empty() {
                warn!("step {step}: no validation samples, skipping validation");
            } else {
                let clip_vs = validate(val, config, backbone, schedule, encoder.as_ref())?;
                log.push(
                    LogRecord::Validation(ValidationRecord {
                        step,
                        clip_vs,
                        prompts: val.len().min(config.validation_prompts),
                    }),
                    &log_path,
                )?;
            }
        }
        let last = step == config.max_steps;
        if last || (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
            let dir = checkpoint_path(out_dir, step);
            write_checkpoint(&dir, config, backbone, &optimizer, &state)?;
            checkpoints.push(dir);
        }
    }
    let final_checkpoint = checkpoints.last().cloned().unwrap_or_else(|| {
        resume
            .map(Path::to_path_buf)
            .unwrap_or_else(|| checkpoint_path(out_dir, state.step))
    });
    Ok(FitOutcome {
        final_checkpoint,
        checkpoints,
        log: log.records,
        state,
    })
}

/// Parameter snapshot keyed by name, for trajectory comparisons.
pub fn parameters(backbone: &Backbone) -> Result<BTreeMap<String, Vec<f32>>> {
    backbone
        .snapshot()?
        .into_iter()
        .map(|(k, t)| Ok((k, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)))
        .collect()
}
