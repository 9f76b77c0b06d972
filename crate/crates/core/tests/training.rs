use std::path::Path;

use candle_core::Device;
use noisycycle::config::ExperimentConfig;
use noisycycle::data::{self, Split};
use noisycycle::nn::fingerprint;
use noisycycle::train::{
    checkpoint, checkpoint_name, epoch_batches, latest_checkpoint, read_metrics_csv, train, RunManifest, RunStatus,
    SupervisedTrainer, TrainOptions, Trainer,
};

/// Small enough for a few seconds per epoch: eight 32x32 scenes in batches of four.
fn config(dir: &Path, name: &str, extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut o: Vec<(String, String)> = [
        ("run.out_dir", dir.display().to_string()),
        ("run.name", name.to_string()),
        ("height", "32".into()),
        ("width", "32".into()),
        ("train_count", "8".into()),
        ("val_count", "2".into()),
        ("epochs_total", "3".into()),
        ("epochs_constant_lr", "1".into()),
        ("checkpoint_every", "1".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    o.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    ExperimentConfig::from_toml(&ExperimentConfig::tiny().to_toml().unwrap(), &o).unwrap()
}

fn run(config: &ExperimentConfig, options: &TrainOptions) -> noisycycle::train::RunOutcome {
    train(config, &config.run_dir(), options, &mut |_| Ok(())).unwrap()
}

#[test]
fn resumed_run_matches_an_unbroken_one() {
    let dir = tempfile::tempdir().unwrap();
    let extra = [("noise", "gauss:6"), ("pool_capacity", "3")];
    let whole = config(dir.path(), "whole", &extra);
    let a = run(&whole, &TrainOptions::default());
    assert_eq!(a.manifest.status, RunStatus::Complete);

    let split = config(dir.path(), "split", &extra);
    let first = run(&split, &TrainOptions { stop_after_epoch: Some(1), ..TrainOptions::default() });
    assert_eq!(first.manifest.status, RunStatus::Stopped);
    assert_eq!(first.rows.len(), 2);
    drop(first);
    let resume = latest_checkpoint(&split.run_dir()).unwrap();
    assert!(resume.ends_with(checkpoint_name(1)));
    let b = run(&split, &TrainOptions { resume: Some(resume), ..TrainOptions::default() });

    assert_eq!(b.manifest.status, RunStatus::Complete);
    let read = |c: &ExperimentConfig| std::fs::read(c.run_dir().join("metrics.csv")).unwrap();
    assert_eq!(read(&whole), read(&split));
    assert_eq!(
        a.trainer.nets.generator_fingerprint().unwrap(),
        b.trainer.nets.generator_fingerprint().unwrap()
    );
    assert_eq!(
        a.trainer.nets.discriminator_fingerprint().unwrap(),
        b.trainer.nets.discriminator_fingerprint().unwrap()
    );
    assert_eq!(a.manifest.epochs, b.manifest.epochs);
}

#[test]
fn learning_rate_schedule_reaches_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), "lr", &[]);
    let out = run(&c, &TrainOptions::default());
    let lrs: Vec<f64> = out.rows.iter().map(|r| r.lr).collect();
    // constant for one epoch, then linear decay that reaches zero at the last epoch
    assert_eq!(lrs, [2e-4, 2e-4, 1e-4, 1e-4, 0.0, 0.0]);
    let epochs: Vec<usize> = out.rows.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, [1, 1, 2, 2, 3, 3]);

    let on_disk = read_metrics_csv(&c.run_dir().join("metrics.csv")).unwrap();
    assert_eq!(on_disk, out.rows);
    let manifest = RunManifest::read(&c.run_dir().join("manifest.toml")).unwrap();
    assert_eq!(manifest.config, c);
    assert_eq!(manifest.train_samples, 8);
    assert_eq!(manifest.epochs.len(), 3);
    assert!(manifest.epochs.iter().all(|e| e.checkpoint.is_some()));
}

#[test]
fn checkpoints_restore_every_network() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), "ckpt", &[("epochs_total", "1")]);
    let out = run(&c, &TrainOptions::default());
    let ckpt = checkpoint::load(&c.run_dir().join(checkpoint_name(1)), &Device::Cpu).unwrap();
    assert_eq!(ckpt.meta.epoch, 1);
    assert_eq!(ckpt.meta.iteration, 2);
    assert_eq!(ckpt.meta.config, c);

    let nets = ckpt.networks(&Device::Cpu).unwrap();
    let saved = out.trainer.nets.state();
    let loaded = nets.state();
    assert_eq!(saved.keys().collect::<Vec<_>>(), loaded.keys().collect::<Vec<_>>());
    for (name, t) in &saved {
        let a = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = loaded[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b, "{name}");
    }

    let trainer = ckpt.trainer(&Device::Cpu).unwrap();
    assert_eq!(trainer.epoch, 1);
    assert_eq!(trainer.pool.len(), out.trainer.pool.len());
    assert_eq!(trainer.pool.rng_word_pos(), out.trainer.pool.rng_word_pos());
}

#[test]
fn resuming_with_another_configuration_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), "a", &[("epochs_total", "1")]);
    run(&c, &TrainOptions::default());
    let other = config(dir.path(), "a", &[("epochs_total", "1"), ("noise", "quant:2")]);
    let resume = Some(c.run_dir().join(checkpoint_name(1)));
    let err = train(&other, &other.run_dir(), &TrainOptions { resume, ..TrainOptions::default() }, &mut |_| Ok(()))
        .err()
        .unwrap();
    assert!(err.to_string().contains("different configuration"), "{err}");
}

#[test]
fn training_is_a_function_of_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let fp = |name: &str, seed: &str| {
        let c = config(dir.path(), name, &[("epochs_total", "1"), ("seed", seed), ("noise", "gauss:0")]);
        let out = run(&c, &TrainOptions::default());
        (out.trainer.nets.generator_fingerprint().unwrap(), out.rows)
    };
    let a = fp("a", "4");
    let b = fp("b", "4");
    let c = fp("c", "5");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn every_iteration_follows_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), "trace", &[("epochs_total", "1"), ("noise", "max-only")]);
    let mut traces = Vec::new();
    train(&c, &c.run_dir(), &TrainOptions { instrument: true, ..TrainOptions::default() }, &mut |t| {
        traces.push(t.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(traces.len(), 2);
    for t in &traces {
        assert!(t.violations().is_empty(), "{:?}", t.violations());
        assert!(t.initial.is_some());
    }
}

#[test]
fn cycle_without_auxiliary_terms_equals_supervised_training() {
    // alpha = gamma = 1 leaves only the segmentation loss in the generator objective
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), "baseline", &[("alpha", "1"), ("gamma", "1"), ("seed", "2")]);
    let cfg = c.train_config();
    let ds = data::open(&c.dataset_spec(), Split::Train, &Device::Cpu).unwrap();
    let mut cycle = Trainer::new(cfg.clone(), 4, &Device::Cpu).unwrap();
    let mut plain = SupervisedTrainer::new(cfg.clone(), 4, &Device::Cpu).unwrap();
    assert_eq!(fingerprint(&cycle.nets.g).unwrap(), fingerprint(&plain.g).unwrap());
    let f0 = fingerprint(&cycle.nets.f).unwrap();
    for epoch in 1..=2 {
        for batch in epoch_batches(cfg.seed, epoch, ds.len(), cfg.batch_size) {
            let (x, y, _) = data::collate(ds.as_ref(), &batch, cfg.precision.dtype()).unwrap();
            let trace = cycle.run_iteration(&x, &y, 2e-4).unwrap();
            let j_seg = plain.run_iteration(&x, &y, 2e-4).unwrap();
            assert_eq!(trace.losses.j_seg, j_seg);
            assert_eq!(trace.losses.j_gen, j_seg);
        }
    }
    assert_eq!(fingerprint(&cycle.nets.g).unwrap(), fingerprint(&plain.g).unwrap());
    // the reconstruction generator receives only zero gradients
    assert_eq!(fingerprint(&cycle.nets.f).unwrap(), f0);
}
