use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

mod commands;
mod config;
mod data;
mod failure;

use failure::Failure;

/// Sound classification experiments over a two-level taxonomy.
#[derive(Debug, Parser)]
#[command(name = "broadsound", version, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    globals: Globals,

    /// TOML file whose values override command-line flags. Top-level keys
    /// set global options; a table named after the subcommand sets its
    /// options (e.g. `[grid] ks = [1, 3, 5]`).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct Globals {
    /// Directory that relative input paths are resolved against.
    #[arg(long, global = true, env = "BROADSOUND_DATA_ROOT", value_name = "DIR")]
    pub data_root: Option<PathBuf>,

    /// Taxonomy TOML; the built-in broad sound taxonomy when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub taxonomy: Option<PathBuf>,

    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Leave the creation time out of run metadata so reruns are byte-identical.
    #[arg(long, global = true)]
    pub no_timestamps: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    #[serde(skip)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the taxonomy.
    Taxonomy(commands::TaxonomyArgs),
    /// Convert WAV files to 44.1 kHz mono 16-bit, cropped to 30 s.
    Standardize(commands::StandardizeArgs),
    /// Assign a stratified evaluation split to a manifest.
    Split(commands::SplitArgs),
    /// Fit a representation pipeline on the training split and export vectors.
    FitRepr(commands::FitReprArgs),
    /// Grid-search k-NN hyperparameters and evaluate the best model.
    Grid(commands::GridArgs),
    /// Compare a second-level run with a top-level run on the same split.
    Compare(commands::CompareArgs),
    /// Evaluate predictions against ground truth.
    Eval(commands::EvalArgs),
    /// Write misclassifications from an evaluation report as a review queue.
    ExportErrors(commands::ExportArgs),
    /// Run the review service.
    Serve(commands::ServeArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Taxonomy(_) => "taxonomy",
            Command::Standardize(_) => "standardize",
            Command::Split(_) => "split",
            Command::FitRepr(_) => "fit-repr",
            Command::Grid(_) => "grid",
            Command::Compare(_) => "compare",
            Command::Eval(_) => "eval",
            Command::ExportErrors(_) => "export-errors",
            Command::Serve(_) => "serve",
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let name = cli.command.name();
    let file = cli.config.as_deref().map(config::ConfigFile::load).transpose()?;
    let mut globals = cli.globals;
    let verbose = globals.verbose;
    if let Some(file) = &file {
        globals = file.apply_globals(globals)?;
        globals.verbose = verbose;
    }
    let ctx = commands::Context::new(name, globals)?;

    macro_rules! dispatch {
        ($args:expr, $f:path) => {{
            let args = match &file {
                Some(file) => file.apply_section(name, $args)?,
                None => $args,
            };
            $f(&ctx, args)
        }};
    }
    match cli.command {
        Command::Taxonomy(a) => dispatch!(a, commands::taxonomy),
        Command::Standardize(a) => dispatch!(a, commands::standardize),
        Command::Split(a) => dispatch!(a, commands::split),
        Command::FitRepr(a) => dispatch!(a, commands::fit_repr),
        Command::Grid(a) => dispatch!(a, commands::grid),
        Command::Compare(a) => dispatch!(a, commands::compare),
        Command::Eval(a) => dispatch!(a, commands::eval),
        Command::ExportErrors(a) => dispatch!(a, commands::export_errors),
        Command::Serve(a) => dispatch!(a, commands::serve),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.globals.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
