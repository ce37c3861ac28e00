mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use proto_audio::dataset::Split;
use proto_audio::training::TrainMode;
use proto_audio::Error;

#[derive(Parser)]
#[command(name = "protoaudio", version, about = "Learn playable spectral prototypes from audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Unsup,
    Sup,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Unsup => TrainMode::Unsupervised,
            Mode::Sup => TrainMode::Supervised,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum What {
    Protos,
    Audio,
    Grid,
}

#[derive(Subcommand)]
enum Command {
    /// Run the curriculum on a manifest's train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides the config's mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Clustering mode maps clusters to classes with the train split.
        #[arg(long, value_enum, default_value = "unsup")]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Where the report files go; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write prototype images, audio and a cross-reconstruction grid.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "protos,audio")]
        what: Vec<What>,
        /// Samples for the grid.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Rows and columns of the grid.
        #[arg(long, default_value_t = 6)]
        grid_size: usize,
    },
    /// Generate a synthetic dataset with a manifest.
    Synth {
        /// Key = value overrides of the generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Version(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Data(_) | Error::Degenerate(_) => 3,
        Error::Numeric(_) | Error::Budget { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PROTO_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            manifest,
            mode,
            seed,
            workers,
            out,
        } => commands::train(&config, &manifest, mode.map(Into::into), seed, workers, &out),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            mode,
            workers,
            out,
        } => commands::eval(&checkpoint, &manifest, split, mode.into(), workers, out.as_deref()),
        Command::Export {
            checkpoint,
            out,
            what,
            manifest,
            split,
            grid_size,
        } => commands::export(
            &checkpoint,
            &out,
            commands::ExportWhat {
                protos: what.contains(&What::Protos),
                audio: what.contains(&What::Audio),
                grid: what.contains(&What::Grid),
            },
            manifest.as_deref(),
            split,
            grid_size,
        ),
        Command::Synth { config, seed, out } => commands::synth(config.as_deref(), seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
