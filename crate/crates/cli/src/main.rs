use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use noisycycle_cli::chart::plot_iou;
use noisycycle_cli::commands::{
    cmd_evaluate, cmd_train, cmd_watermark_probe, parse_overrides, read_series, EvaluateArgs, ProbeArgs, TrainArgs,
};
use noisycycle_cli::matrix::{run_matrix, MatrixConfig};

#[derive(Parser)]
#[command(name = "noisycycle", version, about = "Cycle-consistent segmentation training with latent noise injection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a run; trailing `--key value` pairs override config keys.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file or run directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after_epoch: Option<usize>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the validation split of its (overridden) config.
    Evaluate {
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path; defaults to `<run>/eval/<checkpoint>.report.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write predicted masks as indexed-colour PNGs here.
        #[arg(long)]
        masks_dir: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Train and evaluate a grid of noise settings and seeds; writes a results table.
    Matrix {
        #[arg(long)]
        config: PathBuf,
    },
    /// Grouped bar chart (SVG plus CSV data) of class-wise IoU from evaluation reports.
    PlotIou {
        #[arg(long)]
        out: PathBuf,
        /// Legend label per report, in order; defaults to file names.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Reconstruction PSNR from soft versus hard latents of a checkpoint.
    WatermarkProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            resume,
            stop_after_epoch,
            overrides,
        } => {
            let overrides = parse_overrides(&overrides)?;
            let outcome = cmd_train(&TrainArgs {
                config: config.as_deref(),
                overrides: &overrides,
                resume: resume.as_deref(),
                stop_after_epoch,
            })?;
            println!(
                "{} ({:?}, {} iterations)",
                outcome.run_dir.display(),
                outcome.manifest.status,
                outcome.rows.len()
            );
        }
        Command::Evaluate {
            checkpoint,
            out,
            masks_dir,
            overrides,
        } => {
            let overrides = parse_overrides(&overrides)?;
            let (report, path) = cmd_evaluate(&EvaluateArgs {
                checkpoint: &checkpoint,
                overrides: &overrides,
                out: out.as_deref(),
                masks_dir: masks_dir.as_deref(),
            })?;
            print!("{}", report.to_csv());
            eprintln!("wrote {}", path.display());
        }
        Command::Matrix { config } => {
            let cfg = MatrixConfig::load(&config)?;
            let results = run_matrix(&cfg)?;
            print!("{}", results.table_markdown());
            eprintln!("wrote {}", cfg.out_dir.display());
        }
        Command::PlotIou { out, labels, reports } => {
            let series = read_series(&reports, &labels)?;
            let csv = plot_iou(&series, &out)?;
            println!("{}\n{}", out.display(), csv.display());
        }
        Command::WatermarkProbe {
            checkpoint,
            out,
            overrides,
        } => {
            let overrides = parse_overrides(&overrides)?;
            let (probe, path) = cmd_watermark_probe(&ProbeArgs {
                checkpoint: &checkpoint,
                overrides: &overrides,
                out: out.as_deref(),
            })?;
            println!("delta_psnr_db,{}", probe.delta_db);
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
