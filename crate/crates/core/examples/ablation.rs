//! Desk-scale comparison of the baseline modes on synthetic scenes.
//!
//! `cargo run --release -p chromacode --example ablation -- [modes] [epochs] [scenes]`

use std::time::Instant;

use chromacode::data::{generate_dataset, SceneSpec};
use chromacode::optics::OpticalConfig;
use chromacode::train::{evaluate, train_e2e, Mode, TrainConfig, TrainEnv, TrainOptions};

fn main() -> chromacode::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let modes: Vec<Mode> = args
        .first()
        .map(|s| s.split(',').map(|m| m.parse()).collect::<chromacode::Result<_>>())
        .transpose()?
        .unwrap_or_else(|| vec![Mode::Vanilla, Mode::FixedCca, Mode::LearnedCca]);
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);

    let cfg = OpticalConfig::desk();
    let env = TrainEnv::new(cfg.clone())?;
    let spec = SceneSpec { seed: 2024, ..SceneSpec::default() };
    let scenes = generate_dataset(&spec, &cfg, count)?;
    let split = count * 4 / 5;
    let (train, test) = scenes.split_at(split);
    for mode in modes {
        let t0 = Instant::now();
        let tc = TrainConfig { mode, epochs, ..TrainConfig::default() };
        let out = train_e2e(train, &tc, &env, &TrainOptions { verbose: true, ..Default::default() })?;
        let report = evaluate(&out.checkpoint, test, &env)?;
        println!(
            "{mode}\trmse {:.4}\tmae {:.4}\tdelta1 {:.3}\t{:.0}s",
            report.mean.rmse,
            report.mean.mae,
            report.mean.delta1,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
