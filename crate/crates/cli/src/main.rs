//! `dce`: generate data, train, evaluate, ablate and summarize
//! divide-and-conquer embedding runs.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 bad input data or
//! checkpoint, 4 runtime failure. `DCE_THREADS` caps the worker pool.

mod commands;
mod config;
mod data;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dce_core::dataset::FileFormat;

use commands::{ablate, eval, report, synth, train};
use error::CliError;

#[derive(Parser)]
#[command(name = "dce", version, about = "Divide-and-conquer metric learning")]
struct Cli {
    /// Seed for every random choice; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Binary,
    Csv,
}

impl From<Format> for FileFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Binary => FileFormat::Binary,
            Format::Csv => FileFormat::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modal dataset.
    Synth {
        /// Output file; a `.spec.json` description is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: Format,
        /// Omit the header row in CSV output.
        #[arg(long)]
        no_header: bool,
        /// TOML file providing `synth.*` keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set synth.num_modes=4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train and fine-tune a model, writing a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run directory; defaults to `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs (training plus fine-tuning) are done.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: Format,
        #[arg(long)]
        no_header: bool,
        /// Which side of a class split to evaluate.
        #[arg(long, value_enum, default_value = "all")]
        side: eval::Side,
        /// Fraction of classes on the training side when `--side` is set.
        #[arg(long, default_value_t = 0.5)]
        split_fraction: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ks: Vec<usize>,
        /// Per-learner and prefix recall, correlation and distance histograms.
        #[arg(long)]
        diagnostics: bool,
        /// Leave-one-out mean average precision.
        #[arg(long)]
        map: bool,
        /// Directory for the report; prints JSON to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds to run; defaults to `ablate.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Summarize a run directory and export curve data as CSV.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DCE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("DCE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let seed = cli.seed;
    match cli.command {
        Command::Synth {
            out,
            format,
            no_header,
            config,
            set,
        } => synth::run(
            &synth::SynthArgs {
                config,
                set,
                out,
                format: format.into(),
                csv_header: !no_header,
            },
            seed,
        ),
        Command::Train {
            config,
            set,
            out,
            resume,
            stop_after_epoch,
        } => train::run(
            &train::TrainArgs {
                config,
                set,
                out,
                resume,
                stop_after_epoch,
            },
            seed,
        ),
        Command::Eval {
            checkpoint,
            data,
            format,
            no_header,
            side,
            split_fraction,
            ks,
            diagnostics,
            map,
            out,
        } => eval::run(
            &eval::EvalArgs {
                checkpoint,
                data,
                format: format.into(),
                csv_header: !no_header,
                side,
                split_fraction,
                ks,
                diagnostics,
                map,
                out,
            },
            seed,
        ),
        Command::Ablate { config, set, out, seeds } => ablate::run(&ablate::AblateArgs { config, set, out, seeds }, seed),
        Command::Report { run } => report::run(&report::ReportArgs { run }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
