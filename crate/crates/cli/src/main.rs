//! `artisynth`: corpus ingestion, prompt enhancement, training, sampling,
//! evaluation and reporting from the command line.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use artisynth::corpus::synthetic::{generate_items, write_corpus};
use artisynth::corpus::{
    build_samples, entry_from_attributes, load_corpus, read_jsonl, save_manifest, split_corpus, write_atomic,
    write_jsonl, Corpus, CorpusSplit, EnhancedEntry, PromptSource, SplitName,
};
use artisynth::diffusion::checkpoint::load_checkpoint;
use artisynth::diffusion::desk_backbone;
use artisynth::eval::{
    aggregate_ratings, evaluate_split, generate, load_model, read_rating_csv, render_ratings_table, render_table,
    EvalEncoders, MetricReport,
};
use artisynth::prompt::{EnhanceStatus, Enhancer, HttpTransport, LlmClientConfig, QueryTemplate};
use artisynth::trainer::{fit, TrainConfig};
use artisynth::{Error, Result};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use manifest::{RunManifest, MANIFEST_FILE};

#[derive(Parser, Debug)]
#[command(name = "artisynth", version, about = "Artifact image synthesis pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file (TOML). `train` reads a run config, `enhance` an LLM client config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness of the command; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, or output file for `eval` and `report`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a manifest and write the cleaned corpus, rejects and split.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Query the LLM for expert attributes of every record.
    Enhance {
        #[arg(long)]
        corpus: PathBuf,
        /// Query template (JSON); the bundled template when absent.
        #[arg(long)]
        template: Option<PathBuf>,
        /// Overrides the config endpoint.
        #[arg(long)]
        endpoint: Option<String>,
        /// Overrides the config model.
        #[arg(long)]
        model: Option<String>,
        /// Overrides the config cache directory.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Fine-tune the backbone.
    Train {
        /// Overrides `max_steps`.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Overrides `data.corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Overrides `data.prompts`.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Overrides `data.resume`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample images from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "prompts")]
        prompt: Vec<String>,
        /// Text file with one prompt per line.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Reverse-process steps; the training config's value when absent.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Enhanced prompts (JSON lines); raw descriptions when absent.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Split file; recomputed from the seed when absent.
        #[arg(long)]
        split_file: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Model name written into the report.
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Comparison table from metric reports and an optional rating sheet.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Model label of the rating row.
        #[arg(long, default_value = "Ours")]
        ratings_label: String,
    },
    /// Write a synthetic shapes corpus with prompts.
    SynthCorpus {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Enhance { .. } => "enhance",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
            Command::SynthCorpus { .. } => "synth-corpus",
        }
    }

    fn writes_file(&self) -> bool {
        matches!(self, Command::Eval { .. } | Command::Report { .. })
    }
}

/// What a command read, wrote and ran with.
#[derive(Default)]
struct Outcome {
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("--out is required".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn cmd_ingest(common: &Common, manifest: &Path) -> Result<Outcome> {
    let out = require_out(common)?;
    let seed = common.seed.unwrap_or(0);
    let corpus = load_corpus(manifest)?;
    let split = split_corpus(&corpus.records, seed)?;
    create_dir(out)?;
    let records: Vec<_> = corpus
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.image = corpus.image_path(&r).map(|p| absolute(&p).display().to_string());
            r
        })
        .collect();
    let corpus_path = out.join("corpus.jsonl");
    let rejects_path = out.join("rejects.jsonl");
    let split_path = out.join("split.json");
    save_manifest(&records, &corpus_path)?;
    write_jsonl(&rejects_path, &corpus.rejects)?;
    split.save(&split_path)?;
    log::info!(
        "{} records kept, {} rejected, split {}/{}/{}",
        records.len(),
        corpus.rejects.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(Outcome {
        config: json!({ "seed": seed }),
        inputs: vec![manifest.to_path_buf()],
        outputs: vec![corpus_path, rejects_path, split_path],
    })
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

#[derive(Serialize)]
struct FailureRow<'a> {
    id: &'a str,
    #[serde(flatten)]
    status: &'a EnhanceStatus,
}

fn cmd_enhance(
    common: &Common,
    corpus_path: &Path,
    template: Option<&Path>,
    endpoint: Option<&str>,
    model: Option<&str>,
    cache_dir: Option<&Path>,
) -> Result<Outcome> {
    let out = require_out(common)?;
    let mut config: LlmClientConfig = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => LlmClientConfig::default(),
    };
    if let Some(e) = endpoint {
        config.endpoint = e.to_string();
    }
    if let Some(m) = model {
        config.model = m.to_string();
    }
    if let Some(c) = cache_dir {
        config.cache_dir = Some(c.to_path_buf());
    }
    let template = match template {
        Some(p) => QueryTemplate::load(p)?,
        None => QueryTemplate::bundled(),
    };
    let corpus = load_corpus(corpus_path)?;
    let transport = Arc::new(HttpTransport::new(&config)?);
    let enhancer = Enhancer::new(template, &config, transport)?;
    let statuses = enhancer.enhance_batch(&corpus.records);

    let mut entries: Vec<EnhancedEntry> = Vec::new();
    let mut failures = Vec::new();
    for (record, status) in corpus.records.iter().zip(&statuses) {
        match status.attributes() {
            Some(a) => entries.push(entry_from_attributes(&record.id, a.clone())?),
            None => failures.push(FailureRow { id: &record.id, status }),
        }
    }
    create_dir(out)?;
    let prompts_path = out.join("prompts.jsonl");
    let failures_path = out.join("failures.jsonl");
    write_jsonl(&prompts_path, &entries)?;
    write_jsonl(&failures_path, &failures)?;
    log::info!("{} enhanced, {} failed or incomplete", entries.len(), failures.len());
    if entries.is_empty() && !corpus.records.is_empty() {
        return Err(Error::EnhancementFailed {
            attempts: 0,
            last: format!("no record enhanced; see {}", failures_path.display()),
        });
    }
    Ok(Outcome {
        config: to_value(&config)?,
        inputs: vec![corpus_path.to_path_buf()],
        outputs: vec![prompts_path, failures_path],
    })
}

fn prompt_source(path: Option<&Path>) -> Result<PromptSource> {
    Ok(match path {
        Some(p) => PromptSource::from_entries(read_jsonl(p)?),
        None => PromptSource::Raw,
    })
}

fn load_split(corpus: &Corpus, split_file: Option<&Path>, seed: u64) -> Result<CorpusSplit> {
    match split_file {
        Some(p) => CorpusSplit::load(p),
        None => split_corpus(&corpus.records, seed),
    }
}

fn cmd_train(
    common: &Common,
    max_steps: Option<u64>,
    corpus: Option<&Path>,
    prompts: Option<&Path>,
    resume: Option<&Path>,
) -> Result<Outcome> {
    let out = require_out(common)?;
    let mut config = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(n) = max_steps {
        config.max_steps = n;
    }
    if let Some(c) = corpus {
        config.data.corpus = Some(c.to_path_buf());
    }
    if let Some(p) = prompts {
        config.data.prompts = Some(p.to_path_buf());
    }
    if let Some(r) = resume {
        config.data.resume = Some(r.to_path_buf());
    }
    config.validate()?;

    let corpus_path = config
        .data
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("data.corpus is not set".into()))?;
    let corpus = load_corpus(&corpus_path)?;
    let split = load_split(&corpus, config.data.split.as_deref(), config.seed)?;
    let source = prompt_source(config.data.prompts.as_deref())?;
    let (train, skipped) = build_samples(&corpus, &split.train, &source, config.resolution)?;
    if !skipped.is_empty() {
        log::warn!("{} training records skipped without image or prompt", skipped.len());
    }
    let (val, _) = build_samples(&corpus, &split.val, &source, config.resolution)?;
    let schedule = config.schedule.build()?;
    let backbone = desk_backbone(&config.backbone, config.seed, DType::F32, &Device::Cpu)?;
    let outcome = fit(
        &config,
        &train,
        &val,
        &backbone,
        &schedule,
        out,
        config.data.resume.as_deref(),
    )?;
    log::info!("final checkpoint {}", outcome.final_checkpoint.display());

    let mut inputs = vec![corpus_path];
    inputs.extend(config.data.prompts.clone());
    inputs.extend(config.data.split.clone());
    inputs.extend(config.data.resume.clone());
    let mut outputs = vec![out.join(artisynth::trainer::LOSS_LOG_FILE)];
    outputs.extend(outcome.checkpoints);
    Ok(Outcome {
        config: to_value(&config)?,
        inputs,
        outputs,
    })
}

/// Training config stored with a checkpoint, if any.
fn checkpoint_config(meta_extra: &Value) -> Option<TrainConfig> {
    serde_json::from_value(meta_extra.get("config")?.clone()).ok()
}

fn cmd_generate(
    common: &Common,
    checkpoint: &Path,
    prompt: &[String],
    prompts: Option<&Path>,
    steps: Option<usize>,
) -> Result<Outcome> {
    let out = require_out(common)?;
    let seed = common.seed.unwrap_or(0);
    let texts: Vec<String> = match prompts {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => prompt.to_vec(),
    };
    if texts.is_empty() {
        return Err(Error::InvalidParameter("no prompt given".into()));
    }
    let ck = load_checkpoint(checkpoint)?;
    let steps = steps
        .or_else(|| checkpoint_config(&ck.meta.extra).map(|c| c.sample_steps))
        .unwrap_or(50);
    let model = load_model(checkpoint)?;
    create_dir(out)?;
    let mut outputs = Vec::new();
    let mut failed = 0;
    for (i, text) in texts.iter().enumerate() {
        let path = out.join(format!("{i:04}.png"));
        match generate(&model, text, seed, steps).and_then(|img| img.save_png(&path)) {
            Ok(()) => outputs.push(path),
            Err(e) => {
                log::warn!("prompt {i}: {e}");
                failed += 1;
            }
        }
    }
    if outputs.is_empty() {
        return Err(Error::InvalidParameter(format!("all {failed} prompts failed")));
    }
    let mut inputs = vec![checkpoint.to_path_buf()];
    inputs.extend(prompts.map(Path::to_path_buf));
    Ok(Outcome {
        config: json!({ "seed": seed, "steps": steps, "prompts": texts }),
        inputs,
        outputs,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    corpus_path: &Path,
    prompts: Option<&Path>,
    split_file: Option<&Path>,
    split: &str,
    model_id: Option<&str>,
    steps: Option<usize>,
) -> Result<Outcome> {
    let out = require_out(common)?;
    let seed = common.seed.unwrap_or(0);
    let which: SplitName = split.parse()?;
    let ck = load_checkpoint(checkpoint)?;
    let resolution = ck.meta.backbone.resolution;
    let trained = checkpoint_config(&ck.meta.extra);
    let encoder = trained.as_ref().map(|c| c.encoder.clone()).unwrap_or_default();
    let steps = steps.or(trained.as_ref().map(|c| c.sample_steps)).unwrap_or(50);
    let model = load_model(checkpoint)?;

    let corpus = load_corpus(corpus_path)?;
    let split_ids = load_split(&corpus, split_file, seed)?;
    let source = prompt_source(prompts)?;
    let (samples, skipped) = build_samples(&corpus, split_ids.ids(which), &source, resolution)?;
    if !skipped.is_empty() {
        log::warn!("{} records skipped without image or prompt", skipped.len());
    }
    let encoders = EvalEncoders::from_spec(&encoder, resolution)?;
    let id = model_id
        .map(String::from)
        .unwrap_or_else(|| format!("step-{}", model.step));
    let mut report = evaluate_split(&model, &id, split, &samples, &encoders, seed, steps)?;
    report.meta.timestamp_unix = source_date_epoch();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.save(out)?;
    let table = out.with_extension("md");
    write_text(&table, &render_table(std::slice::from_ref(&report)))?;
    if report.aggregates.is_none() {
        return Err(Error::InvalidParameter(format!(
            "every sample of split {split} failed; see {}",
            out.display()
        )));
    }

    let mut inputs = vec![checkpoint.to_path_buf(), corpus_path.to_path_buf()];
    inputs.extend(prompts.map(Path::to_path_buf));
    inputs.extend(split_file.map(Path::to_path_buf));
    Ok(Outcome {
        config: json!({ "seed": seed, "steps": steps, "split": split, "model": id, "encoder": encoder }),
        inputs,
        outputs: vec![out.to_path_buf(), table],
    })
}

/// Report timestamps are only written when a reproducible build time is given.
fn source_date_epoch() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()
}

fn cmd_report(common: &Common, metrics: &[PathBuf], ratings: Option<&Path>, label: &str) -> Result<Outcome> {
    let out = require_out(common)?;
    let reports = metrics
        .iter()
        .map(|p| MetricReport::load(p))
        .collect::<Result<Vec<_>>>()?;
    let mut text = render_table(&reports);
    if let Some(path) = ratings {
        let summary = aggregate_ratings(&read_rating_csv(path)?)?;
        text.push('\n');
        text.push_str(&render_ratings_table(label, &summary));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out, &text)?;
    print!("{text}");
    let mut inputs = metrics.to_vec();
    inputs.extend(ratings.map(Path::to_path_buf));
    Ok(Outcome {
        config: json!({ "ratings_label": label }),
        inputs,
        outputs: vec![out.to_path_buf()],
    })
}

fn cmd_synth(common: &Common, count: usize, resolution: usize) -> Result<Outcome> {
    let out = require_out(common)?;
    let seed = common.seed.unwrap_or(0);
    if resolution < 8 {
        return Err(Error::InvalidParameter("resolution must be >= 8".into()));
    }
    let items = generate_items(count, resolution, seed);
    write_corpus(out, &items)?;
    Ok(Outcome {
        config: json!({ "seed": seed, "count": count, "resolution": resolution }),
        inputs: Vec::new(),
        outputs: vec![
            out.join(artisynth::corpus::MANIFEST_FILE),
            out.join(artisynth::corpus::synthetic::PROMPTS_FILE),
        ],
    })
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    let c = &cli.common;
    match &cli.command {
        Command::Ingest { manifest } => cmd_ingest(c, manifest),
        Command::Enhance {
            corpus,
            template,
            endpoint,
            model,
            cache_dir,
        } => cmd_enhance(
            c,
            corpus,
            template.as_deref(),
            endpoint.as_deref(),
            model.as_deref(),
            cache_dir.as_deref(),
        ),
        Command::Train {
            max_steps,
            corpus,
            prompts,
            resume,
        } => cmd_train(c, *max_steps, corpus.as_deref(), prompts.as_deref(), resume.as_deref()),
        Command::Generate {
            checkpoint,
            prompt,
            prompts,
            steps,
        } => cmd_generate(c, checkpoint, prompt, prompts.as_deref(), *steps),
        Command::Eval {
            checkpoint,
            corpus,
            prompts,
            split_file,
            split,
            model_id,
            steps,
        } => cmd_eval(
            c,
            checkpoint,
            corpus,
            prompts.as_deref(),
            split_file.as_deref(),
            split,
            model_id.as_deref(),
            *steps,
        ),
        Command::Report {
            metrics,
            ratings,
            ratings_label,
        } => cmd_report(c, metrics, ratings.as_deref(), ratings_label),
        Command::SynthCorpus { count, resolution } => cmd_synth(c, *count, *resolution),
    }
}

fn manifest_path(cli: &Cli) -> Option<PathBuf> {
    let out = cli.common.out.as_ref()?;
    Some(if cli.command.writes_file() {
        let mut name = out.file_name()?.to_os_string();
        name.push(".run_manifest.json");
        out.with_file_name(name)
    } else {
        out.join(MANIFEST_FILE)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    let result = dispatch(&cli);
    let code = if result.is_ok() { 0 } else { 1 };

    let (outcome, error) = match result {
        Ok(o) => (o, None),
        Err(e) => {
            let msg = format!("{}: {e}", e.kind()).replace('\n', " ");
            (Outcome::default(), Some(msg))
        }
    };
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config: outcome.config,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        exit_status: code,
        error: error.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(path) = manifest_path(&cli) {
        if let Err(e) = manifest.write(&path) {
            log::warn!("could not write run manifest: {e}");
        }
    }
    match error {
        Some(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
        None => ExitCode::SUCCESS,
    }
}
