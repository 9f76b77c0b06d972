//! The subcommands as library functions, so tests drive them without spawning processes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use noisycycle::config::ExperimentConfig;
use noisycycle::data::{self, export, Split};
use noisycycle::eval::{self, CycleModel, EvalOptions, EvalReport, ProbeReport};
use noisycycle::tensor::argmax_mask;
use noisycycle::train::{self, checkpoint, latest_checkpoint, Networks, RunOutcome, TrainOptions};

/// Turns trailing `--key value` / `--key=value` arguments into config overrides.
/// Dashes inside a key are read as underscores.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!("unexpected argument `{arg}`; overrides take the form --key value");
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let value = it
                    .next()
                    .with_context(|| format!("override --{flag} needs a value"))?;
                (flag.to_string(), value.clone())
            }
        };
        if key.is_empty() {
            bail!("empty override key in `{arg}`");
        }
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Loads the config file (if any) with overrides applied on top.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path, overrides)?)
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub overrides: &'a [(String, String)],
    /// Continue from this checkpoint, or from the latest checkpoint of this run directory.
    pub resume: Option<&'a Path>,
    pub stop_after_epoch: Option<usize>,
}

pub fn cmd_train(args: &TrainArgs<'_>) -> Result<RunOutcome> {
    let config = load_config(args.config, args.overrides)?;
    let run_dir = config.run_dir();
    let options = TrainOptions {
        resume: args.resume.map(resolve_checkpoint).transpose()?,
        stop_after_epoch: args.stop_after_epoch,
        instrument: false,
    };
    let total = config.train.epochs_total;
    let outcome = train::train(&config, &run_dir, &options, &mut |t| {
        if t.iteration % 50 == 0 {
            log::debug!("epoch {}/{total} iteration {}: j_gen {:.4}", t.epoch, t.iteration, t.losses.j_gen);
        }
        Ok(())
    })
    .with_context(|| format!("training into {}", run_dir.display()))?;
    Ok(outcome)
}

/// A checkpoint file, or a run directory standing for its newest checkpoint.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(latest_checkpoint(path)?)
    } else if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        bail!("no checkpoint or run directory at {}", path.display())
    }
}

/// Run directory owning a checkpoint: the parent of its `checkpoints/` directory.
pub fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(name) if name == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

/// The checkpoint's networks and its stored config with `overrides` applied, which may
/// redirect evaluation to other data.
pub fn load_checkpoint(path: &Path, overrides: &[(String, String)]) -> Result<(ExperimentConfig, Networks)> {
    let path = resolve_checkpoint(path)?;
    let ckpt = checkpoint::load(&path, &Device::Cpu)?;
    let config = ExperimentConfig::from_toml(&ckpt.meta.config.to_toml()?, overrides)?;
    let nets = ckpt.networks(&Device::Cpu)?;
    Ok((config, nets))
}

pub fn eval_options(config: &ExperimentConfig) -> EvalOptions {
    EvalOptions {
        classes: config.eval_classes(),
        mean_mode: config.eval.mean_mode,
        noise: config.train.noise,
        noise_at_eval: config.eval.noise_at_eval,
        seed: config.train.seed,
    }
}

fn default_output(checkpoint: &Path, suffix: &str) -> Result<PathBuf> {
    let path = resolve_checkpoint(checkpoint)?;
    let stem = path
        .file_stem()
        .map_or_else(|| "checkpoint".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(run_dir_of(&path).join("eval").join(format!("{stem}.{suffix}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Evaluates `model` on the validation split of `config` and writes the report.
pub fn evaluate_model(
    model: &mut dyn CycleModel,
    config: &ExperimentConfig,
    out: &Path,
    masks_dir: Option<&Path>,
) -> Result<EvalReport> {
    let spec = config.dataset_spec();
    let dataset = data::open(&spec, Split::Val, &Device::Cpu)?;
    let report = eval::evaluate(model, dataset.as_ref(), &spec.class_names(), &eval_options(config))?;
    write_text(out, &report.to_csv())?;
    if let Some(dir) = masks_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let palette = export::palette(spec.classes);
        for index in 0..dataset.len() {
            let sample = dataset.get(index)?;
            let pred = argmax_mask(model.segment(&sample.image)?.tensor())?;
            export::write_indexed_png(&dir.join(format!("{index:05}.png")), &pred, &palette)?;
        }
    }
    Ok(report)
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub overrides: &'a [(String, String)],
    pub out: Option<&'a Path>,
    pub masks_dir: Option<&'a Path>,
}

/// Returns the report and where it was written.
pub fn cmd_evaluate(args: &EvaluateArgs<'_>) -> Result<(EvalReport, PathBuf)> {
    let (config, mut nets) = load_checkpoint(args.checkpoint, args.overrides)?;
    let out = match args.out {
        Some(p) => p.to_path_buf(),
        None => default_output(args.checkpoint, "report.csv")?,
    };
    let report = evaluate_model(&mut nets, &config, &out, args.masks_dir)?;
    Ok((report, out))
}

pub fn probe_model(model: &mut dyn CycleModel, config: &ExperimentConfig, out: &Path) -> Result<ProbeReport> {
    let dataset = data::open(&config.dataset_spec(), Split::Val, &Device::Cpu)?;
    let probe = eval::watermark_probe(model, dataset.as_ref())?;
    write_text(out, &probe.to_csv())?;
    Ok(probe)
}

pub struct ProbeArgs<'a> {
    pub checkpoint: &'a Path,
    pub overrides: &'a [(String, String)],
    pub out: Option<&'a Path>,
}

pub fn cmd_watermark_probe(args: &ProbeArgs<'_>) -> Result<(ProbeReport, PathBuf)> {
    let (config, mut nets) = load_checkpoint(args.checkpoint, args.overrides)?;
    let out = match args.out {
        Some(p) => p.to_path_buf(),
        None => default_output(args.checkpoint, "probe.csv")?,
    };
    let probe = probe_model(&mut nets, &config, &out)?;
    Ok((probe, out))
}

/// Reads evaluation reports; each series is labelled by `labels[i]` or else the file stem.
pub fn read_series(reports: &[PathBuf], labels: &[String]) -> Result<Vec<crate::chart::Series>> {
    if !labels.is_empty() && labels.len() != reports.len() {
        bail!("{} labels given for {} reports", labels.len(), reports.len());
    }
    reports
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let report = eval::parse_report_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
            let label = labels.get(i).cloned().unwrap_or_else(|| {
                path.file_stem().map_or_else(|| format!("report {i}"), |s| s.to_string_lossy().into_owned())
            });
            Ok(crate::chart::Series { label, report })
        })
        .collect()
}
