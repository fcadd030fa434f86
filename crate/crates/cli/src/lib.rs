//! Command-line front end: config files, dataset and checkpoint formats,
//! and the `generate`/`preprocess`/`train`/`eval`/`plot` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use msrt_core::encoder::Architecture;

pub use config::RunConfig;
pub use dataset::Dataset;
pub use error::{CliError, CliResult, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Msrt,
    Baseline,
}

impl From<ModelArg> for Architecture {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Msrt => Architecture::Msrt,
            ModelArg::Baseline => Architecture::Baseline,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "msrt", version, about = "VLF lightning waveform classification")]
pub struct Cli {
    /// JSON run configuration (a bare config or any JSON artifact written by this tool).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the generator, model and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic dataset (binary, or CSV for a .csv path).
    Generate {
        /// Output dataset; defaults to `paths.dataset` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Records per class; defaults to `generator.per_class`.
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Apply the DC-removal, low-pass and notch chain to every record.
    Preprocess {
        /// Dataset to filter.
        #[arg(long)]
        input: PathBuf,
        /// Filtered dataset.
        #[arg(long)]
        out: PathBuf,
        /// Sampling rate in Hz.
        #[arg(long)]
        sample_rate_hz: Option<f64>,
        /// Low-pass cutoff in Hz.
        #[arg(long)]
        cutoff_hz: Option<f64>,
        /// Butterworth order of the low-pass.
        #[arg(long)]
        lowpass_order: Option<usize>,
        /// Mains frequency in Hz.
        #[arg(long)]
        notch_base_hz: Option<f64>,
        /// Number of notched harmonics, the fundamental included.
        #[arg(long)]
        notch_harmonics: Option<usize>,
        /// Quality factor of every notch.
        #[arg(long)]
        notch_q: Option<f64>,
    },
    /// Train a model and write a checkpoint plus an evaluation report.
    Train {
        /// Training dataset; defaults to `paths.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint path; defaults to `paths.checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Architecture; defaults to `model.architecture`.
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Held-out dataset for the report; defaults to the training set.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or run k-fold cross-validation.
    Eval {
        /// Trained checkpoint; not needed with `--kfold`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to evaluate on; defaults to `paths.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory for the report and CSV exports; defaults to `paths.output`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Train and test k models on a k-fold partition.
        #[arg(long)]
        kfold: Option<usize>,
        /// Architecture trained by `--kfold`.
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Correlation heatmaps for the first N records.
        #[arg(long, default_value_t = 0)]
        heatmaps: usize,
        /// Heatmap window length in samples.
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// Heatmap window stride in samples.
        #[arg(long, default_value_t = 50)]
        stride: usize,
        /// Feature-map histograms for the first N records.
        #[arg(long, default_value_t = 0)]
        histograms: usize,
        /// Histogram bin count.
        #[arg(long, default_value_t = 32)]
        bins: usize,
        /// Also render every curve CSV as SVG.
        #[arg(long)]
        svg: bool,
    },
    /// Render an exported CSV as SVG.
    Plot {
        /// CSV written by `eval`.
        #[arg(long)]
        input: PathBuf,
        /// SVG output.
        #[arg(long)]
        out: PathBuf,
        /// Figure title; defaults to the input file stem.
        #[arg(long)]
        title: Option<String>,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let force = cli.force;
    match cli.command {
        Command::Generate { out, per_class } => {
            commands::generate(cfg, out, per_class, force)?;
        }
        Command::Preprocess {
            input,
            out,
            sample_rate_hz,
            cutoff_hz,
            lowpass_order,
            notch_base_hz,
            notch_harmonics,
            notch_q,
        } => {
            let f = &mut cfg.filter;
            f.sample_rate_hz = sample_rate_hz.unwrap_or(f.sample_rate_hz);
            f.lowpass_cutoff_hz = cutoff_hz.unwrap_or(f.lowpass_cutoff_hz);
            f.lowpass_order = lowpass_order.unwrap_or(f.lowpass_order);
            f.notch_base_hz = notch_base_hz.unwrap_or(f.notch_base_hz);
            f.notch_harmonics = notch_harmonics.unwrap_or(f.notch_harmonics);
            f.notch_q = notch_q.unwrap_or(f.notch_q);
            commands::preprocess_file(cfg, &input, &out, force)?;
        }
        Command::Train {
            dataset,
            out,
            model,
            test,
            report,
        } => {
            commands::train(
                cfg,
                commands::TrainArgs {
                    dataset,
                    out,
                    model: model.map(Into::into),
                    test,
                    report,
                    force,
                },
            )?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            out_dir,
            kfold,
            model,
            heatmaps,
            window,
            stride,
            histograms,
            bins,
            svg,
        } => {
            commands::eval(
                cfg,
                commands::EvalArgs {
                    checkpoint,
                    dataset,
                    out_dir,
                    kfold,
                    model: model.map(Into::into),
                    heatmaps,
                    window,
                    stride,
                    histograms,
                    bins,
                    svg,
                    force,
                },
            )?;
        }
        Command::Plot { input, out, title } => commands::plot_file(&input, &out, title, force)?,
    }
    Ok(())
}
