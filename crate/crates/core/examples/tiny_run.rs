//! Trains the desk-scale preset and evaluates it on held-out scenes.
//!
//! `cargo run --release --example tiny_run -- [noise] [seed] [epochs]`

use std::time::Instant;

use candle_core::Device;
use noisycycle::config::ExperimentConfig;
use noisycycle::data::{self, Split};
use noisycycle::eval::{evaluate, watermark_probe, EvalOptions};
use noisycycle::train::{train, TrainOptions};

fn main() -> noisycycle::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut overrides = vec![("run.out_dir".to_string(), std::env::temp_dir().join("noisycycle-example").display().to_string())];
    if let Some(noise) = args.first() {
        overrides.push(("noise".into(), noise.clone()));
    }
    if let Some(seed) = args.get(1) {
        overrides.push(("seed".into(), seed.clone()));
    }
    if let Some(epochs) = args.get(2) {
        overrides.push(("epochs_total".into(), epochs.clone()));
        overrides.push(("epochs_constant_lr".into(), epochs.clone()));
    }
    let config = ExperimentConfig::from_toml(&ExperimentConfig::tiny().to_toml()?, &overrides)?;
    let start = Instant::now();
    let outcome = train(&config, &config.run_dir(), &TrainOptions::default(), &mut |_| Ok(()))?;
    println!("trained {} iterations in {:.1?}", outcome.rows.len(), start.elapsed());
    let first: f64 = outcome.rows.iter().take(20).map(|r| r.j_seg).sum::<f64>() / 20.0;
    let last: f64 = outcome.rows.iter().rev().take(20).map(|r| r.j_seg).sum::<f64>() / 20.0;
    println!("j_seg moving average {first:.4} -> {last:.4}");

    let spec = config.dataset_spec();
    let val = data::open(&spec, Split::Val, &Device::Cpu)?;
    let mut nets = outcome.trainer.nets;
    let opts = EvalOptions {
        classes: config.eval_classes(),
        mean_mode: config.eval.mean_mode,
        noise: config.train.noise,
        noise_at_eval: config.eval.noise_at_eval,
        seed: config.train.seed,
    };
    let report = evaluate(&mut nets, val.as_ref(), &spec.class_names(), &opts)?;
    print!("{}", report.to_csv());
    let probe = watermark_probe(&mut nets, val.as_ref())?;
    println!("probe delta {:.3} dB", probe.delta_db);
    Ok(())
}
