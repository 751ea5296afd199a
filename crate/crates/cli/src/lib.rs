//! The `lnc` command-line tool: training, collapsing, verification and
//! reporting on top of the `lincollapse` library.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod commands;
mod report;

pub use commands::*;
pub use report::cmd_report;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const VERIFY: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] lincollapse::Error),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Lib(_) => exit::DATA,
            CliError::Verify(_) => exit::VERIFY,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lnc", version, about = "Train, collapse and evaluate activation-free prediction models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train four-layer intra predictors and their least-squares counterparts.
    TrainIntra(TrainArgs),
    /// Train one three-layer interpolation network per quarter-sample position.
    TrainInterp(TrainArgs),
    /// Train the attention-based chroma predictor.
    TrainChroma(TrainArgs),
    /// Fold a multi-layer linear model into a single layer.
    Collapse {
        model_in: PathBuf,
        model_out: PathBuf,
        /// Drop the fused bias of a convolutional model, as done when
        /// deriving interpolation filters.
        #[arg(long)]
        drop_bias: bool,
    },
    /// Check that two models compute the same function (exit 3 if not).
    Verify {
        model_a: PathBuf,
        model_b: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Side of the random test planes for convolutional models.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Collapse trained interpolation networks into a 13x13 filter set.
    DeriveFilters {
        models_dir: PathBuf,
        out_file: PathBuf,
        /// Rescale every filter to unit DC gain.
        #[arg(long)]
        normalize_dc: bool,
        /// Per-tap CSV; defaults to `<out_file>.taps.csv`.
        #[arg(long)]
        taps: Option<PathBuf>,
    },
    /// Weight of every reference sample for one predicted pixel, as a CSV grid.
    ContribMap {
        model: PathBuf,
        /// Row-major index of the pixel inside the block.
        #[arg(long)]
        pixel: usize,
        /// Block size; checked against the model.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one block of a frame with an intra model.
    Predict {
        model: PathBuf,
        frame: PathBuf,
        #[arg(long)]
        x: usize,
        #[arg(long)]
        y: usize,
        /// Predicted block, clipped, as PGM.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bjontegaard delta rate of `test` against `anchor`.
    Bdrate {
        anchor: PathBuf,
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize the models found in a training output directory.
    Report {
        workspace: PathBuf,
        /// Held-out PGM for the filter statistics; synthetic when absent.
        #[arg(long)]
        image: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainIntra(a) => cmd_train_intra(a.config.as_deref(), a.out.as_deref()).map(drop),
        Command::TrainInterp(a) => cmd_train_interp(a.config.as_deref(), a.out.as_deref()).map(drop),
        Command::TrainChroma(a) => cmd_train_chroma(a.config.as_deref(), a.out.as_deref()).map(drop),
        Command::Collapse { model_in, model_out, drop_bias } => {
            let (before, after) = cmd_collapse(&model_in, &model_out, drop_bias)?;
            println!("{:<28}{:>12}{:>12}", "", "before", "after");
            println!("{:<28}{:>12}{:>12}", "parameters", before.param_count, after.param_count);
            println!("{:<28}{:>12}{:>12}", "weights", before.weights, after.weights);
            println!("{:<28}{:>12}{:>12}", "biases", before.biases, after.biases);
            println!(
                "{:<28}{:>12}{:>12}",
                "MACs per output sample", before.mac_count_per_output_sample, after.mac_count_per_output_sample
            );
            Ok(())
        }
        Command::Verify { model_a, model_b, trials, tol, size } => {
            let r = cmd_verify(&model_a, &model_b, trials, tol, size)?;
            println!(
                "trials {}  max abs error {:.3e}  max rel error {:.3e}  tolerance {:.1e}  {}",
                r.trials,
                r.max_abs_error,
                r.max_rel_error,
                r.tolerance,
                if r.pass { "PASS" } else { "FAIL" }
            );
            if r.pass {
                Ok(())
            } else {
                Err(CliError::Verify(format!("max relative error {:.3e} exceeds {:.1e}", r.max_rel_error, tol)))
            }
        }
        Command::DeriveFilters { models_dir, out_file, normalize_dc, taps } => {
            let taps = taps.unwrap_or_else(|| {
                let mut s = out_file.clone().into_os_string();
                s.push(".taps.csv");
                PathBuf::from(s)
            });
            let report = cmd_derive_filters(&models_dir, &out_file, &taps, normalize_dc)?;
            println!("position  dc_gain             dropped_bias");
            for e in &report.entries {
                println!("{:<10}{:<20.12}{:.6e}", e.pos.tag(), e.dc_gain, e.dropped_bias);
            }
            Ok(())
        }
        Command::ContribMap { model, pixel, n, out } => {
            let csv = cmd_contrib_map(&model, n, pixel)?;
            match out {
                Some(p) => lincollapse::formats::write_file(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Predict { model, frame, x, y, out } => {
            let (_, psnr) = cmd_predict(&model, &frame, x, y, out.as_deref())?;
            println!("PSNR {psnr:.2} dB");
            Ok(())
        }
        Command::Bdrate { anchor, test, out } => {
            let r = cmd_bdrate(&anchor, &test, out.as_deref())?;
            println!("BD-rate: {}%", format_percent(r.bd_rate_percent));
            println!("PSNR overlap: {:.4} dB .. {:.4} dB", r.overlap.0, r.overlap.1);
            Ok(())
        }
        Command::Report { workspace, image } => {
            let path = cmd_report(&workspace, image.as_deref())?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

/// Two decimals, never `-0.00`.
pub fn format_percent(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    format!("{:.2}", if r == 0.0 { 0.0 } else { r })
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match execute(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
