//! Experiment matrix: a grid of labelled noise settings times seeds, trained (or reused)
//! and evaluated, then summarised as a results table with published reference columns.
//!
//! ```toml
//! base = "tiny.toml"          # experiment config shared by all runs, relative to this file
//! out_dir = "runs/matrix"
//! seeds = [0, 1, 2]
//! train_missing = true        # false: every run must already exist
//!
//! [overrides]                 # applied on top of `base`
//! epochs_total = 50
//!
//! [[run]]
//! label = "quant2"
//! noise = "quant:2"
//!
//! [[run]]
//! label = "gauss-matched"
//! noise = "gauss:match:quant2"  # Gaussian at the SNR measured for run `quant2`
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{evaluate_model, probe_model};
use crate::reference::{self, ReferenceRow};
use noisycycle::config::ExperimentConfig;
use noisycycle::noise::NoiseSpec;
use noisycycle::train::{self, latest_checkpoint, RunManifest, RunStatus, TrainOptions};

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default)]
    pub base: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "yes")]
    pub train_missing: bool,
    #[serde(default)]
    pub overrides: toml::Table,
    #[serde(rename = "run")]
    pub runs: Vec<MatrixRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRun {
    pub label: String,
    pub noise: String,
}

/// Noise of a matrix entry: fixed, or Gaussian at another entry's measured SNR.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixNoise {
    Fixed(NoiseSpec),
    GaussMatched(String),
}

impl std::str::FromStr for MatrixNoise {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().strip_prefix("gauss:match:") {
            Some(label) if !label.is_empty() => Ok(MatrixNoise::GaussMatched(label.to_string())),
            Some(_) => bail!("`gauss:match:` needs a run label"),
            None => Ok(MatrixNoise::Fixed(s.parse()?)),
        }
    }
}

/// Whether a row's SNR was measured on the data or configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnrKind {
    Measured,
    Set,
}

impl SnrKind {
    pub fn name(self) -> &'static str {
        match self {
            SnrKind::Measured => "measured",
            SnrKind::Set => "set",
        }
    }
}

fn label_ok(label: &str) -> bool {
    !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !label.starts_with('.')
}

impl MatrixConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: MatrixConfig =
            toml::from_str(&text).with_context(|| format!("parsing matrix config {}", path.display()))?;
        if let Some(base) = &cfg.base {
            if base.is_relative() {
                cfg.base = Some(path.parent().unwrap_or(Path::new(".")).join(base));
            }
        }
        Ok(cfg)
    }

    /// Parsed noise per run, after checking labels, seeds and match references.
    pub fn validate(&self) -> Result<Vec<MatrixNoise>> {
        ensure!(!self.runs.is_empty(), "matrix lists no runs");
        ensure!(!self.seeds.is_empty(), "matrix lists no seeds");
        let seeds: BTreeSet<u64> = self.seeds.iter().copied().collect();
        ensure!(seeds.len() == self.seeds.len(), "matrix seeds repeat");
        let mut seen: Vec<(&str, &MatrixNoise)> = Vec::new();
        let noises = self
            .runs
            .iter()
            .map(|r| r.noise.parse::<MatrixNoise>().with_context(|| format!("run `{}`", r.label)))
            .collect::<Result<Vec<_>>>()?;
        for (run, noise) in self.runs.iter().zip(&noises) {
            ensure!(
                label_ok(&run.label),
                "run label `{}` must be non-empty and use only letters, digits, `-`, `_`, `.`",
                run.label
            );
            ensure!(
                seen.iter().all(|(l, _)| *l != run.label),
                "run label `{}` appears twice",
                run.label
            );
            if let MatrixNoise::GaussMatched(target) = noise {
                match seen.iter().find(|(l, _)| l == target) {
                    Some((_, MatrixNoise::Fixed(NoiseSpec::Quantize { .. } | NoiseSpec::MaxOnly))) => {}
                    Some(_) => bail!(
                        "run `{}` matches `{target}`, which has no measured SNR (use a quantization or max-only run)",
                        run.label
                    ),
                    None => bail!("run `{}` matches `{target}`, which must be listed before it", run.label),
                }
            }
            seen.push((&run.label, noise));
        }
        Ok(noises)
    }

    pub fn run_dir(&self, label: &str, seed: u64) -> PathBuf {
        self.out_dir.join(label).join(format!("seed-{seed}"))
    }

    /// Experiment config of one run.
    pub fn experiment(&self, label: &str, noise: &NoiseSpec, seed: u64) -> Result<ExperimentConfig> {
        let base = match &self.base {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading base config {}", p.display()))?,
            None => String::new(),
        };
        let mut overrides: Vec<(String, String)> = self
            .overrides
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), v)
            })
            .collect();
        overrides.push(("train.noise".into(), noise.to_string()));
        overrides.push(("train.seed".into(), seed.to_string()));
        overrides.push(("run.out_dir".into(), self.out_dir.join(label).display().to_string()));
        overrides.push(("run.name".into(), format!("seed-{seed}")));
        Ok(ExperimentConfig::from_toml(&base, &overrides)?)
    }
}

/// Result of one (run, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Fraction in `[0, 1]`.
    pub miou: f64,
    pub psnr_db: f64,
    /// Mean latent SNR measured during evaluation.
    pub snr_db: f64,
    pub probe_delta_db: f64,
}

/// Trains the run if needed and returns its final checkpoint.
fn ensure_trained(config: &ExperimentConfig, train_missing: bool) -> Result<PathBuf> {
    let run_dir = config.run_dir();
    let manifest_path = run_dir.join("manifest.toml");
    let mut options = TrainOptions::default();
    if manifest_path.exists() {
        let manifest = RunManifest::read(&manifest_path)?;
        // name and location are not part of a run's identity
        let stored = ExperimentConfig { run: config.run.clone(), ..manifest.config };
        if stored != *config {
            bail!(
                "{} holds a run with a different configuration; remove it or change out_dir",
                run_dir.display()
            );
        }
        if manifest.status == RunStatus::Complete {
            return Ok(latest_checkpoint(&run_dir)?);
        }
        ensure!(train_missing, "run {} is incomplete and train_missing is off", run_dir.display());
        options.resume = latest_checkpoint(&run_dir).ok();
    } else {
        ensure!(train_missing, "run {} is missing and train_missing is off", run_dir.display());
    }
    log::info!("training {}", run_dir.display());
    train::train(config, &run_dir, &options, &mut |_| Ok(()))
        .with_context(|| format!("training {}", run_dir.display()))?;
    Ok(latest_checkpoint(&run_dir)?)
}

fn run_cell(cfg: &MatrixConfig, label: &str, noise: NoiseSpec, seed: u64) -> Result<RunResult> {
    let config = cfg.experiment(label, &noise, seed)?;
    let checkpoint = ensure_trained(&config, cfg.train_missing)?;
    let (config, mut nets) = crate::commands::load_checkpoint(&checkpoint, &[])?;
    let run_dir = cfg.run_dir(label, seed);
    let report = evaluate_model(&mut nets, &config, &run_dir.join("eval").join("report.csv"), None)?;
    let probe = probe_model(&mut nets, &config, &run_dir.join("eval").join("probe.csv"))?;
    Ok(RunResult {
        label: label.to_string(),
        noise,
        seed,
        run_dir,
        miou: report.miou,
        psnr_db: report.psnr_db,
        snr_db: report.snr_db,
        probe_delta_db: probe.delta_db,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs (or reuses) every cell, entry by entry, and writes the summary files to `out_dir`.
pub fn run_matrix(cfg: &MatrixConfig) -> Result<MatrixResults> {
    let noises = cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut results: Vec<RunResult> = Vec::new();
    for (run, noise) in cfg.runs.iter().zip(&noises) {
        let spec = match noise {
            MatrixNoise::Fixed(spec) => *spec,
            MatrixNoise::GaussMatched(target) => NoiseSpec::Gaussian {
                snr_db: mean(results.iter().filter(|r| &r.label == target).map(|r| r.snr_db)),
            },
        };
        for &seed in &cfg.seeds {
            let r = run_cell(cfg, &run.label, spec, seed)
                .with_context(|| format!("matrix run `{}` seed {seed}", run.label))?;
            log::info!(
                "{} seed {seed}: mIoU {:.4} PSNR {:.2} dB probe {:.3} dB",
                r.label,
                r.miou,
                r.psnr_db,
                r.probe_delta_db
            );
            results.push(r);
        }
    }
    let out = MatrixResults { runs: results };
    out.write(&cfg.out_dir)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub noise: NoiseSpec,
    pub bits: Option<u32>,
    /// Absent for runs without noise.
    pub snr: Option<(f64, SnrKind)>,
    /// Percent, mean and sample standard deviation over seeds.
    pub miou_pct: f64,
    pub miou_std_pct: f64,
    pub psnr_db: f64,
    pub probe_delta_db: f64,
    pub seeds: usize,
    pub reference: Option<&'static ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixResults {
    pub runs: Vec<RunResult>,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("--".to_string(), |v| format!("{v:.digits$}"))
}

impl MatrixResults {
    /// One row per label, in first-appearance order.
    pub fn table(&self) -> Vec<TableRow> {
        let mut labels: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
        }
        labels
            .into_iter()
            .map(|label| {
                let runs: Vec<&RunResult> = self.runs.iter().filter(|r| r.label == label).collect();
                let noise = runs[0].noise;
                let miou: Vec<f64> = runs.iter().map(|r| r.miou * 100.0).collect();
                let miou_pct = mean(miou.iter().copied());
                let miou_std_pct = if miou.len() > 1 {
                    (miou.iter().map(|m| (m - miou_pct).powi(2)).sum::<f64>() / (miou.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                let snr = match noise {
                    NoiseSpec::None => None,
                    NoiseSpec::Gaussian { snr_db } => Some((snr_db, SnrKind::Set)),
                    NoiseSpec::MaxOnly | NoiseSpec::Quantize { .. } => {
                        Some((mean(runs.iter().map(|r| r.snr_db)), SnrKind::Measured))
                    }
                };
                TableRow {
                    label: label.to_string(),
                    noise,
                    bits: match noise {
                        NoiseSpec::Quantize { bits } => Some(bits),
                        _ => None,
                    },
                    snr,
                    miou_pct,
                    miou_std_pct,
                    psnr_db: mean(runs.iter().map(|r| r.psnr_db)),
                    probe_delta_db: mean(runs.iter().map(|r| r.probe_delta_db)),
                    seeds: runs.len(),
                    reference: reference::lookup(&noise),
                }
            })
            .collect()
    }

    /// Per-seed mIoU of two labels, for seeds present in both.
    pub fn paired_miou(&self, a: &str, b: &str) -> Vec<(u64, f64, f64)> {
        self.runs
            .iter()
            .filter(|r| r.label == a)
            .filter_map(|ra| {
                self.runs
                    .iter()
                    .find(|rb| rb.label == b && rb.seed == ra.seed)
                    .map(|rb| (ra.seed, ra.miou, rb.miou))
            })
            .collect()
    }

    pub fn runs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "noise", "seed", "miou", "psnr_db", "snr_db", "probe_delta_db", "run_dir"])?;
        for r in &self.runs {
            w.write_record([
                r.label.clone(),
                r.noise.to_string(),
                r.seed.to_string(),
                r.miou.to_string(),
                r.psnr_db.to_string(),
                r.snr_db.to_string(),
                r.probe_delta_db.to_string(),
                r.run_dir.display().to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn table_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "label",
            "network",
            "noise_type",
            "bits",
            "snr_db",
            "snr_kind",
            "miou_pct",
            "miou_std_pct",
            "psnr_db",
            "probe_delta_db",
            "seeds",
            "ref_snr_db",
            "ref_miou_pct",
            "ref_psnr_db",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for t in self.table() {
            w.write_record([
                t.label.clone(),
                "CycleGAN ERFNet".into(),
                t.noise.kind().into(),
                t.bits.map_or(String::new(), |b| b.to_string()),
                opt(t.snr.map(|s| s.0)),
                t.snr.map_or(String::new(), |s| s.1.name().into()),
                t.miou_pct.to_string(),
                t.miou_std_pct.to_string(),
                t.psnr_db.to_string(),
                t.probe_delta_db.to_string(),
                t.seeds.to_string(),
                opt(t.reference.and_then(|r| r.snr_db)),
                opt(t.reference.map(|r| r.miou)),
                opt(t.reference.and_then(|r| r.psnr_db)),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn table_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str(
            "| Run | Network | Noise type | Bits | SNR [dB] | SNR source | mIoU [%] | PSNR [dB] \
             | Probe ΔPSNR [dB] | Seeds | Ref. SNR [dB] | Ref. mIoU [%] | Ref. PSNR [dB] |\n",
        );
        s.push_str("|---|---|---|---:|---:|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for t in self.table() {
            let _ = writeln!(
                s,
                "| {} | CycleGAN ERFNet | {} | {} | {} | {} | {:.1} ± {:.1} | {:.2} | {:.3} | {} | {} | {} | {} |",
                t.label,
                t.noise.kind(),
                t.bits.map_or("--".into(), |b| b.to_string()),
                fmt_opt(t.snr.map(|s| s.0), 2),
                t.snr.map_or("--", |s| s.1.name()),
                t.miou_pct,
                t.miou_std_pct,
                t.psnr_db,
                t.probe_delta_db,
                t.seeds,
                fmt_opt(t.reference.and_then(|r| r.snr_db), 2),
                fmt_opt(t.reference.map(|r| r.miou), 1),
                fmt_opt(t.reference.and_then(|r| r.psnr_db), 2),
            );
        }
        let plain = reference::plain_erfnet();
        let _ = writeln!(
            s,
            "\nSNR source: `measured` is the validation-set mean latent SNR (quantization, max-only); \
             `set` is the configured Gaussian target.\nReference columns are published full-scale \
             Cityscapes results (plain supervised ERFNet: mIoU {:.1} %).",
            plain.miou
        );
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let files = [
            ("runs.csv", self.runs_csv()?),
            ("table.csv", self.table_csv()?),
            ("table.md", self.table_markdown()),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}
