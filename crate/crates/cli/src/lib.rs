//! `accent-forge`: one entry point for the whole pipeline.
//!
//! Exit codes: 0 on success, 2 for usage errors, 3 for validation errors
//! and 1 for runtime failures. Failures print a single line
//! `error class=<class> kind=<kind>: <message>` on stderr.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;
pub mod tables;

pub use config::RunConfig;
pub use error::CliError;
pub use tables::{reproduce_tables, ReferenceTables, TableReport};

#[derive(Debug, Parser)]
#[command(name = "accent-forge", version, about = "Cross-lingual anti-spoofing pipeline")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded execution for bit-stable outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Voice transcripts through a TTS engine group.
    Expand(ExpandArgs),
    #[command(subcommand)]
    Manifest(ManifestCommand),
    Train(TrainArgs),
    Score(ScoreArgs),
    Eval(EvalArgs),
    /// Recompute derived table columns from packaged EERs.
    Report(ReportArgs),
    #[command(name = "build-vc-cl3")]
    BuildVcCl3(BuildVcArgs),
    #[command(name = "build-tts-cl")]
    BuildTtsCl(BuildTtsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    /// Transcript file, or a directory of `.txt` files.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    /// Engine registry (TOML).
    #[arg(long)]
    pub engines: Option<PathBuf>,
    /// `eng` or `mix`.
    #[arg(long, default_value = "eng")]
    pub group: String,
    /// `uniform_random` or `round_robin`.
    #[arg(long, default_value = "uniform_random")]
    pub policy: String,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ManifestCommand {
    /// Count records per group.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated subset of label, language, source, portion.
        #[arg(long, default_value = "label")]
        by: String,
        #[arg(long, value_enum, default_value = "tsv")]
        format: TableFormat,
    },
    /// Stratified train/validation split.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "4:1")]
        ratio: String,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_valid: PathBuf,
    },
    /// Stratified downsample to an exact size.
    Downsample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Merge {
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "merged")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TableFormat {
    Tsv,
    Csv,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Output directory for `checkpoint.json` and `history.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Earlier `report.json` to compute relative changes against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub model_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Reference file; the packaged one by default.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildVcArgs {
    #[arg(long)]
    pub bona: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildTtsArgs {
    #[arg(long)]
    pub bona: PathBuf,
    /// Directory of `<language>.txt` transcript files.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    #[arg(long)]
    pub engines: Option<PathBuf>,
    #[arg(long, default_value = "wavernn")]
    pub vocoder_tag: String,
    #[arg(long, default_value_t = 5.0)]
    pub spoof_per_bona: f64,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .try_init();
}

fn usage_kind(kind: clap::error::ErrorKind) -> &'static str {
    use clap::error::ErrorKind as K;
    match kind {
        K::InvalidSubcommand => "unknown_subcommand",
        K::UnknownArgument => "unknown_argument",
        K::MissingRequiredArgument => "missing_argument",
        K::MissingSubcommand | K::DisplayHelpOnMissingArgumentOrSubcommand => "missing_subcommand",
        K::InvalidValue | K::ValueValidation => "invalid_value",
        _ => "bad_arguments",
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let message = e.to_string();
            let first = message
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            let err = CliError::Usage {
                kind: usage_kind(e.kind()).to_string(),
                message: first.to_string(),
            };
            eprintln!("{}", err.line());
            return err.exit_code();
        }
    };
    init_logging();
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
