use std::fs;
use std::path::Path;

use artisynth::diffusion::{desk_backbone, BackboneConfig};
use artisynth::supervision::LossWeights;
use artisynth::trainer::ablation::{desk_data, DeskData};
use artisynth::trainer::{fit, parameters, FitOutcome, LogRecord, TermSwitches, TrainConfig, LOSS_LOG_FILE};
use candle_core::{DType, Device};

fn small_config(seed: u64, max_steps: u64) -> TrainConfig {
    TrainConfig {
        seed,
        max_steps,
        batch_size: 8,
        learning_rate: 2e-3,
        eval_every: 0,
        checkpoint_every: 0,
        resolution: 8,
        sample_steps: 5,
        validation_prompts: 2,
        contrastive_candidates: 4,
        backbone: BackboneConfig {
            resolution: 8,
            channels: 8,
            ..BackboneConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn data() -> DeskData {
    desk_data(40, 8, 3).unwrap()
}

fn train(
    config: &TrainConfig,
    data: &DeskData,
    out: &Path,
    resume: Option<&Path>,
) -> (FitOutcome, artisynth::diffusion::Backbone) {
    let backbone = desk_backbone(&config.backbone, config.seed, DType::F32, &Device::Cpu).unwrap();
    let schedule = config.schedule.build().unwrap();
    let outcome = fit(config, &data.train, &data.val, &backbone, &schedule, out, resume).unwrap();
    (outcome, backbone)
}

fn train_records(log: &[LogRecord]) -> Vec<artisynth::trainer::StepRecord> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Train(s) => Some(s.clone()),
            _ => None,
        })
        .collect()
}

#[test]
fn identical_runs_write_identical_logs() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(4, 12);
    train(&config, &d, &dir.path().join("a"), None);
    train(&config, &d, &dir.path().join("b"), None);
    let a = fs::read(dir.path().join("a").join(LOSS_LOG_FILE)).unwrap();
    let b = fs::read(dir.path().join("b").join(LOSS_LOG_FILE)).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let full = small_config(6, 16);
    let (_, straight) = train(&full, &d, &dir.path().join("straight"), None);

    let mut first = full.clone();
    first.max_steps = 7;
    let split_dir = dir.path().join("split");
    let (head, _) = train(&first, &d, &split_dir, None);
    let (tail, resumed) = train(&full, &d, &split_dir, Some(&head.final_checkpoint));

    assert_eq!(tail.state.step, 16);
    assert_eq!(parameters(&straight).unwrap(), parameters(&resumed).unwrap());
    assert_eq!(
        fs::read(dir.path().join("straight").join(LOSS_LOG_FILE)).unwrap(),
        fs::read(split_dir.join(LOSS_LOG_FILE)).unwrap()
    );
}

#[test]
fn validation_runs_on_its_cadence() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        eval_every: 10,
        ..small_config(1, 30)
    };
    let (outcome, _) = train(&config, &d, dir.path(), None);
    let steps: Vec<u64> = outcome
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Validation(v) => Some(v.step),
            _ => None,
        })
        .collect();
    assert_eq!(steps, vec![10, 20, 30]);
    assert_eq!(train_records(&outcome.log).len(), 30);
}

#[test]
fn a_single_step_leaves_one_checkpoint() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let (outcome, _) = train(&small_config(2, 1), &d, dir.path(), None);
    assert_eq!(outcome.checkpoints.len(), 1);
    assert!(outcome.final_checkpoint.join("meta.json").exists());
}

#[test]
fn checkpoints_follow_their_cadence() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        checkpoint_every: 4,
        ..small_config(2, 10)
    };
    let (outcome, _) = train(&config, &d, dir.path(), None);
    let names: Vec<String> = outcome
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step-000004", "step-000008", "step-000010"]);
}

/// Trains with every term built and the given weights zeroed, and with the
/// same terms switched off, and compares the trajectories.
fn zeroed_matches_omitted(zero: impl Fn(&mut LossWeights), off: impl Fn(&mut TermSwitches)) {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let mut zeroed = small_config(9, 6);
    zero(&mut zeroed.loss_weights);
    let mut omitted = zeroed.clone();
    off(&mut omitted.terms);
    let (a, pa) = train(&zeroed, &d, &dir.path().join("zeroed"), None);
    let (b, pb) = train(&omitted, &d, &dir.path().join("omitted"), None);
    let (ra, rb) = (train_records(&a.log), train_records(&b.log));
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.sd, y.sd, "step {}", x.step);
        assert_eq!(x.total, y.total, "step {}", x.step);
    }
    assert_eq!(parameters(&pa).unwrap(), parameters(&pb).unwrap());
}

#[test]
fn zero_text_weight_equals_omitting_the_text_term() {
    zeroed_matches_omitted(|w| w.text = 0.0, |t| t.text = false);
}

#[test]
fn zero_edge_and_perceptual_weights_equal_omitting_them() {
    zeroed_matches_omitted(
        |w| {
            w.edge = 0.0;
            w.perceptual = 0.0;
        },
        |t| {
            t.edge = false;
            t.perceptual = false;
        },
    );
}

#[test]
fn all_zero_weights_equal_the_base_objective() {
    zeroed_matches_omitted(
        |w| {
            w.text = 0.0;
            w.edge = 0.0;
            w.perceptual = 0.0;
        },
        |t| *t = TermSwitches::none(),
    );
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(5, 8);
    let (outcome, _) = train(&config, &d, dir.path(), None);
    let w = config.loss_weights;
    for r in train_records(&outcome.log) {
        let expect =
            r.sd + w.text * r.text.unwrap_or(0.0) + w.edge * r.edge.unwrap() + w.perceptual * r.perceptual.unwrap();
        assert!(
            (r.total - expect).abs() <= 1e-6,
            "step {}: {} vs {expect}",
            r.step,
            r.total
        );
        assert!(r.min_snr_mean_weight > 0.0 && r.min_snr_mean_weight <= 1.0);
    }
}

#[test]
fn base_loss_decreases_over_training() {
    let d = data();
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(seed, 200);
        config.terms = TermSwitches::none();
        config.loss_weights = LossWeights::base_only();
        let (outcome, _) = train(&config, &d, dir.path(), None);
        let sd: Vec<f64> = train_records(&outcome.log).iter().map(|r| r.sd).collect();
        let early = sd[..10].iter().sum::<f64>() / 10.0;
        let late = sd[190..].iter().sum::<f64>() / 10.0;
        assert!(late < early, "seed {seed}: {late} >= {early}");
    }
}
