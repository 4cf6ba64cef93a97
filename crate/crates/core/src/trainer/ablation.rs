//! Desk-scale ablation arms on the synthetic shape corpus.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device};

use super::{fit, TermSwitches, TrainConfig};
use crate::corpus::synthetic::{generate_items, to_samples};
use crate::corpus::{split_corpus, TrainingSample};
use crate::diffusion::desk_backbone;
use crate::error::Result;
use crate::eval::{evaluate_split, load_model, EvalEncoders, MetricReport};
use crate::supervision::LossWeights;

/// Train/validation/test samples of a synthetic corpus.
pub struct DeskData {
    pub train: Vec<TrainingSample>,
    pub val: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
}

pub fn desk_data(count: usize, resolution: usize, seed: u64) -> Result<DeskData> {
    let items = generate_items(count, resolution, seed);
    let records: Vec<_> = items.iter().map(|i| i.record.clone()).collect();
    let split = split_corpus(&records, seed)?;
    let samples = to_samples(&items)?;
    let pick = |ids: &[String]| -> Vec<TrainingSample> {
        ids.iter()
            .filter_map(|id| samples.iter().find(|s| &s.record_id == id).cloned())
            .collect()
    };
    Ok(DeskData {
        train: pick(&split.train),
        val: pick(&split.val),
        test: pick(&split.test),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Denoising loss only.
    Base,
    /// Denoising plus edge and perceptual terms.
    EdgePerceptual,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Base => "L_SD",
            Arm::EdgePerceptual => "L_SD + edge + perceptual",
        }
    }

    /// Applies the arm's weights and term switches to `base`.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Arm::Base => {
                c.loss_weights = LossWeights {
                    snr_gamma: base.loss_weights.snr_gamma,
                    ..LossWeights::base_only()
                };
                c.terms = TermSwitches::none();
            }
            Arm::EdgePerceptual => {
                let d = LossWeights::default();
                c.loss_weights = LossWeights {
                    text: 0.0,
                    edge: d.edge,
                    perceptual: d.perceptual,
                    snr_gamma: base.loss_weights.snr_gamma,
                };
                c.terms = TermSwitches {
                    text: false,
                    edge: true,
                    perceptual: true,
                };
            }
        }
        c
    }
}

pub struct ArmResult {
    pub report: MetricReport,
    pub train_seconds: f64,
}

/// Trains one arm from a fresh backbone seeded by `config.seed` and scores
/// the test split.
pub fn run_arm(
    arm: Arm,
    base: &TrainConfig,
    data: &DeskData,
    encoders: &EvalEncoders,
    out_dir: &Path,
) -> Result<ArmResult> {
    let config = arm.configure(base);
    let schedule = config.schedule.build()?;
    let backbone = desk_backbone(&config.backbone, config.seed, DType::F32, &Device::Cpu)?;
    let start = Instant::now();
    let outcome = fit(&config, &data.train, &data.val, &backbone, &schedule, out_dir, None)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let model = load_model(&outcome.final_checkpoint)?;
    let report = evaluate_split(
        &model,
        arm.label(),
        "test",
        &data.test,
        encoders,
        config.seed,
        config.sample_steps,
    )?;
    Ok(ArmResult { report, train_seconds })
}
