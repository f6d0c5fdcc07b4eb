mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::BankArgs;
use config::BankRecipe;

/// Filter-bank regularization experiments.
#[derive(Parser)]
#[command(name = "fbr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Recipe {
    /// Gabor bank (orientations x frequencies)
    #[arg(long)]
    gabor: bool,
    /// Leung-Malik bank (48 filters)
    #[arg(long)]
    lm: bool,
    /// Gabor followed by Leung-Malik
    #[arg(long)]
    union: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a filter bank file
    Bank {
        #[command(flatten)]
        recipe: Recipe,
        #[arg(long, default_value_t = 10)]
        orient: usize,
        #[arg(long, default_value_t = 7)]
        freqs: usize,
        /// Odd filter side in pixels
        #[arg(long, default_value_t = 49)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a PGM grid of the filters
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Summarize a filter bank file
    BankInfo { path: PathBuf },
    /// Run an experiment described by a key = value config file
    Train {
        config: PathBuf,
        /// Override a config entry, e.g. --set lambda_fbr=1e-4
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Test-set cross-entropy and accuracy of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Tile the kernel slices of one convolution layer into a PGM image
    ExportKernels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tile the activation maps of a test image at the given layers
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Final accuracy and cross-entropy of several runs, best first
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the CSV table here instead of stdout
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Bank {
            recipe,
            orient,
            freqs,
            size,
            out,
            render,
        } => {
            let recipe = if recipe.gabor {
                BankRecipe::Gabor
            } else if recipe.lm {
                BankRecipe::Lm
            } else {
                BankRecipe::Union
            };
            let args = BankArgs {
                recipe,
                orientations: orient,
                frequencies: freqs,
                size,
                external: None,
            };
            commands::cmd_bank(&args, &out, render.as_deref())
        }
        Command::BankInfo { path } => commands::cmd_bank_info(&path),
        Command::Train { config, overrides } => commands::cmd_train(&config, &overrides),
        Command::Eval { checkpoint, config } => commands::cmd_eval(&checkpoint, &config),
        Command::ExportKernels { checkpoint, layer, out } => commands::cmd_export_kernels(&checkpoint, layer, &out),
        Command::ExportFeatures {
            checkpoint,
            config,
            image,
            layers,
            out_dir,
        } => commands::cmd_export_features(&checkpoint, &config, image, &layers, &out_dir),
        Command::Compare { runs, csv } => commands::cmd_compare(&runs, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<fbr_core::Error>(), Some(fbr_core::Error::Numeric { .. })));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}
