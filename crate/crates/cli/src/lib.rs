//! Command-line driver: `simulate`, `separate`, `dereverb` and `evaluate`.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{RunConfig, Settings};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tiss", version, about = "Blind source separation and dereverberation")]
pub struct Cli {
    /// TOML file with default settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a seeded scene: mix.wav, src_<k>.wav images and scene.json.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Separate a multichannel WAV into est_<k>.wav files.
    Separate {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Dereverberate a multichannel WAV with WPE.
    Dereverb {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Score estimates against references and write an SDR/SIR report.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        estimates: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        references: Vec<PathBuf>,
        /// Report from `separate`, whose cost trace is copied over.
        #[arg(long)]
        separation_report: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
}

impl Command {
    fn settings(&self) -> &Settings {
        match self {
            Command::Simulate { settings, .. }
            | Command::Separate { settings, .. }
            | Command::Dereverb { settings, .. }
            | Command::Evaluate { settings, .. } => settings,
        }
    }
}

/// Resolves the layered configuration for a parsed command line.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let file = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let defaults = match cli.command {
        Command::Dereverb { .. } => RunConfig::dereverb_defaults(),
        _ => RunConfig::default(),
    };
    RunConfig::resolve(cli.command.settings(), &file, &defaults)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    let job = || match &cli.command {
        Command::Simulate { out, .. } => commands::cmd_simulate(&cfg, out),
        Command::Separate { input, out, .. } => commands::cmd_separate(&cfg, input, out),
        Command::Dereverb { input, output, .. } => commands::cmd_dereverb(&cfg, input, output),
        Command::Evaluate {
            estimates,
            references,
            separation_report,
            ..
        } => commands::cmd_evaluate(&cfg, estimates, references, separation_report.as_deref())
            .map(|_| ()),
    };
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?
            .install(job),
        None => job(),
    }
}
