//! Epoch loop with checkpointing, metrics log and run manifest.

use std::path::{Path, PathBuf};

use candle_core::Device;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{checkpoint, lr_at_epoch, IterationTrace, Trainer};
use crate::config::ExperimentConfig;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for, Stream};

pub const METRICS_HEADER: &str = "epoch,iteration,j_seg,j_adv,j_rec_x,j_rec_y,j_gen,j_disc,latent_snr_db,lr";
pub const MANIFEST_FORMAT: &str = "noisycycle-run";

/// One line of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iteration: u64,
    pub j_seg: f64,
    pub j_adv: f64,
    pub j_rec_x: f64,
    pub j_rec_y: f64,
    pub j_gen: f64,
    pub j_disc: f64,
    pub latent_snr_db: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn from_trace(t: &IterationTrace) -> Self {
        let l = &t.losses;
        Self {
            epoch: t.epoch,
            iteration: t.iteration,
            j_seg: l.j_seg,
            j_adv: l.j_adv,
            j_rec_x: l.j_rec_x,
            j_rec_y: l.j_rec_y,
            j_gen: l.j_gen,
            j_disc: l.j_disc,
            latent_snr_db: t.latent_snr_db,
            lr: t.lr,
        }
    }

    /// CSV line; floats use the shortest exact representation, infinity prints as `inf`.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iteration,
            self.j_seg,
            self.j_adv,
            self.j_rec_x,
            self.j_rec_y,
            self.j_gen,
            self.j_disc,
            self.latent_snr_db,
            self.lr
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Invalid(format!("metrics row has {} fields: `{line}`", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Invalid(format!("bad number `{s}` in metrics row")))
        };
        Ok(Self {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad epoch `{}`", f[0])))?,
            iteration: f[1]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad iteration `{}`", f[1])))?,
            j_seg: num(f[2])?,
            j_adv: num(f[3])?,
            j_rec_x: num(f[4])?,
            j_rec_y: num(f[5])?,
            j_gen: num(f[6])?,
            j_disc: num(f[7])?,
            latent_snr_db: num(f[8])?,
            lr: num(f[9])?,
        })
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::file(path, "unexpected metrics header"));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse).collect()
}

fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub scene: u64,
    /// Seed of the image pool's random stream, derived from the training seed.
    pub pool: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub j_seg: f64,
    pub j_adv: f64,
    pub j_rec_x: f64,
    pub j_rec_y: f64,
    pub j_gen: f64,
    pub j_disc: f64,
    pub latent_snr_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl EpochSummary {
    fn from_rows(epoch: usize, rows: &[MetricsRow]) -> Self {
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
        Self {
            epoch,
            lr: rows.first().map_or(0.0, |r| r.lr),
            iterations: rows.len(),
            j_seg: mean(|r| r.j_seg),
            j_adv: mean(|r| r.j_adv),
            j_rec_x: mean(|r| r.j_rec_x),
            j_rec_y: mean(|r| r.j_rec_y),
            j_gen: mean(|r| r.j_gen),
            j_disc: mean(|r| r.j_disc),
            latent_snr_db: mean(|r| r.latent_snr_db),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Stopped,
    Complete,
}

/// Contents of `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub package_version: String,
    pub status: RunStatus,
    pub classes: usize,
    pub train_samples: usize,
    pub seeds: Seeds,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub epochs: Vec<EpochSummary>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::file(path, format!("bad manifest: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::file(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Sample order of `epoch`, cut into batches; the last batch may be short.
pub fn epoch_batches(seed: u64, epoch: usize, samples: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng_for(seed, Stream::Shuffle, epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:04}.safetensors")
}

#[derive(Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Leave the loop after this epoch (the manifest is marked `stopped`).
    pub stop_after_epoch: Option<usize>,
    /// Record parameter digests at every protocol step.
    pub instrument: bool,
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub trainer: Trainer,
    pub manifest: RunManifest,
    pub rows: Vec<MetricsRow>,
}

/// Trains `config` into `run_dir`, calling `on_iteration` after every iteration.
pub fn train(
    config: &ExperimentConfig,
    run_dir: &Path,
    options: &TrainOptions,
    on_iteration: &mut dyn FnMut(&IterationTrace) -> Result<()>,
) -> Result<RunOutcome> {
    config.validate()?;
    let device = Device::Cpu;
    let spec = config.dataset_spec();
    let dataset = data::open(&spec, Split::Train, &device)?;
    train_on(config, dataset.as_ref(), run_dir, options, on_iteration)
}

/// [`train`] on an already opened dataset.
pub fn train_on(
    config: &ExperimentConfig,
    dataset: &dyn Dataset,
    run_dir: &Path,
    options: &TrainOptions,
    on_iteration: &mut dyn FnMut(&IterationTrace) -> Result<()>,
) -> Result<RunOutcome> {
    if dataset.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let cfg = config.train_config();
    let classes = dataset.classes();
    let device = Device::Cpu;
    std::fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| Error::io(run_dir, e))?;
    let manifest_path = run_dir.join("manifest.toml");
    let metrics_path = run_dir.join("metrics.csv");

    let (mut trainer, mut rows, mut manifest) = match &options.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path, &device)?;
            if ckpt.meta.config.train_config() != cfg || ckpt.meta.classes != classes {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            let trainer = ckpt.trainer(&device)?;
            let done = trainer.epoch;
            let rows: Vec<MetricsRow> = read_metrics_csv(&metrics_path)?
                .into_iter()
                .filter(|r| r.epoch <= done)
                .collect();
            let mut manifest = RunManifest::read(&manifest_path)?;
            manifest.epochs.retain(|e| e.epoch <= done);
            (trainer, rows, manifest)
        }
        None => {
            let manifest = RunManifest {
                format: MANIFEST_FORMAT.into(),
                package_version: env!("CARGO_PKG_VERSION").into(),
                status: RunStatus::Running,
                classes,
                train_samples: dataset.len(),
                seeds: Seeds {
                    train: cfg.seed,
                    scene: config.data.scene_seed,
                    pool: derive_seed(cfg.seed, Stream::Pool, 0),
                },
                config: config.clone(),
                epochs: Vec::new(),
            };
            (Trainer::new(cfg.clone(), classes, &device)?, Vec::new(), manifest)
        }
    };
    trainer.instrument = options.instrument;
    manifest.status = RunStatus::Running;
    manifest.write(&manifest_path)?;
    write_metrics_csv(&metrics_path, &rows)?;

    let dtype = cfg.precision.dtype();
    let last = options
        .stop_after_epoch
        .unwrap_or(cfg.epochs_total)
        .min(cfg.epochs_total);
    for epoch in trainer.epoch + 1..=last {
        let lr = lr_at_epoch(epoch, &cfg)?;
        let first_row = rows.len();
        for batch in epoch_batches(cfg.seed, epoch, dataset.len(), cfg.batch_size) {
            let (images, masks, _) = data::collate(dataset, &batch, dtype)?;
            let trace = trainer.run_iteration(&images, &masks, lr)?;
            on_iteration(&trace)?;
            rows.push(MetricsRow::from_trace(&trace));
        }
        trainer.epoch = epoch;
        let mut summary = EpochSummary::from_rows(epoch, &rows[first_row..]);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs_total || epoch == last {
            let name = checkpoint_name(epoch);
            checkpoint::save(&run_dir.join(&name), &trainer, config)?;
            summary.checkpoint = Some(name);
        }
        manifest.epochs.push(summary);
        write_metrics_csv(&metrics_path, &rows)?;
        manifest.write(&manifest_path)?;
        log::info!(
            "epoch {epoch}/{}: j_gen {:.4} j_seg {:.4} j_disc {:.4}",
            cfg.epochs_total,
            manifest.epochs.last().map_or(0.0, |e| e.j_gen),
            manifest.epochs.last().map_or(0.0, |e| e.j_seg),
            manifest.epochs.last().map_or(0.0, |e| e.j_disc),
        );
    }
    manifest.status = if trainer.epoch == cfg.epochs_total {
        RunStatus::Complete
    } else {
        RunStatus::Stopped
    };
    manifest.write(&manifest_path)?;
    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        trainer,
        manifest,
        rows,
    })
}

/// Path of the newest checkpoint listed in a run manifest.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let manifest = RunManifest::read(&run_dir.join("manifest.toml"))?;
    manifest
        .epochs
        .iter()
        .rev()
        .find_map(|e| e.checkpoint.as_ref())
        .map(|c| run_dir.join(c))
        .ok_or_else(|| Error::file(run_dir, "run has no checkpoint"))
}
