//! Trains the two desk ablation arms on the synthetic shape corpus and prints
//! test-split metrics per seed.
//!
//! cargo run --release -p artisynth-core --example desk_ablation -- [steps] [seeds...]

use std::time::Instant;

use artisynth::eval::{render_table, EvalEncoders};
use artisynth::trainer::ablation::{desk_data, run_arm, Arm};
use artisynth::trainer::TrainConfig;

fn main() -> artisynth::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seeds: Vec<u64> = if args.len() > 1 {
        args[1..].iter().filter_map(|s| s.parse().ok()).collect()
    } else {
        vec![0, 1, 2]
    };
    let data = desk_data(200, 16, 7)?;
    let tmp = std::env::temp_dir().join("artisynth-desk-ablation");
    for seed in seeds {
        let config = TrainConfig {
            seed,
            max_steps: steps,
            batch_size: 16,
            learning_rate: 2e-3,
            eval_every: 0,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let encoders = EvalEncoders::from_spec(&config.encoder, config.resolution)?;
        let mut reports = Vec::new();
        for arm in [Arm::Base, Arm::EdgePerceptual] {
            let start = Instant::now();
            let r = run_arm(arm, &config, &data, &encoders, &tmp.join(format!("seed{seed}-{arm:?}")))?;
            eprintln!(
                "seed {seed} {arm:?}: train {:.1}s, total {:.1}s",
                r.train_seconds,
                start.elapsed().as_secs_f64()
            );
            reports.push(r.report);
        }
        println!("seed {seed}\n{}", render_table(&reports));
    }
    Ok(())
}
