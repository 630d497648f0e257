mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdtsde::Error;

/// Cross-domain translation with spatially mixed diffusion schedules.
#[derive(Parser, Debug)]
#[command(name = "cdtsde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    Dataset {
        #[arg(long)]
        config: PathBuf,
    },
    /// Jointly train the toy predictor and the mixing schedule.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (default: <out_dir>/dataset).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Translate every source image of a dataset.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Parameter file (default: <out_dir>/model.cdp).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dump the state every k sampler steps (0 disables).
        #[arg(long, default_value_t = 0)]
        dump_every: usize,
    },
    /// Score generated images against the dataset targets.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Directory of `pair_XXXX_gen.cdt` files (default: <out_dir>/samples).
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Optimize global and pixelwise schedules on the reference instances.
    Energy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the oracle and property suite; exits nonzero on any failure.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also train and compare the linear and dynamic schedules (about 20 minutes).
        #[arg(long)]
        ablation: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_VERIFY: u8 = 5;
const EXIT_NUMERIC: u8 = 6;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io(_) => EXIT_IO,
        Error::Format { .. } | Error::Csv(_) | Error::Dimension { .. } => EXIT_FORMAT,
        _ => EXIT_NUMERIC,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset { config } => commands::dataset(&config),
        Command::Train { config, data } => commands::train(&config, data),
        Command::Sample {
            config,
            params,
            data,
            dump_every,
        } => commands::sample(&config, params, data, dump_every),
        Command::Evaluate { config, generated, data } => commands::evaluate(&config, generated, data),
        Command::Energy { config } => commands::energy(&config),
        Command::Verify { config, ablation } => match commands::verify(config.as_deref(), ablation) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_VERIFY),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
