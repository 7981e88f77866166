mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::{resolve, ConfigFile};
use crate::manifest::RunManifest;

const OUT_ENV: &str = "ILLUMFIELD_OUT";

/// Spherical neural illumination fields: training, fitting and inverse rendering.
#[derive(Debug, Parser)]
#[command(name = "illumfield", version, propagate_version = true)]
struct Cli {
    /// Directory receiving every artifact of the run [default: $ILLUMFIELD_OUT, else ./out]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// TOML file with per-command tables; flags given on the command line win
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random choice made by the run [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic set of HDR environment maps
    GenData(commands::data::GenDataArgs),
    /// Train a field and its latent bank on a directory of .hdr files
    Train(commands::train::TrainArgs),
    /// Fit a latent code to an image, optionally through a mask
    Fit(commands::latent::FitArgs),
    /// Fit to half of an image and decode the full sphere
    Complete(commands::latent::CompleteArgs),
    /// Decode random codes drawn from the prior
    Sample(commands::latent::SampleArgs),
    /// Decode a straight line between two codes
    Interpolate(commands::latent::InterpolateArgs),
    /// Rotate a code about the vertical axis and decode it
    Rotate(commands::latent::RotateArgs),
    /// Recover lighting from a rendered sphere
    Invert(commands::invert::InvertArgs),
    /// Fit a spherical harmonic or spherical Gaussian baseline
    BaselineFit(commands::baseline::BaselineArgs),
    /// Score a model and the baselines on held-out images
    Eval(commands::eval::EvalArgs),
    /// Measure the equivariance error of a model
    Audit(commands::audit::AuditArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Fit(_) => "fit",
            Command::Complete(_) => "complete",
            Command::Sample(_) => "sample",
            Command::Interpolate(_) => "interpolate",
            Command::Rotate(_) => "rotate",
            Command::Invert(_) => "invert",
            Command::BaselineFit(_) => "baseline-fit",
            Command::Eval(_) => "eval",
            Command::Audit(_) => "audit",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Resolves a command's arguments against the config file, then runs it
/// between two manifest writes.
macro_rules! dispatch {
    ($cli:expr, $file:expr, $name:expr, $args:expr, $run:path) => {{
        let args = resolve($args, $file.command_table($name)?)?;
        let ctx = Ctx::new(
            out_dir(&$cli, &$file)?,
            $cli.seed.or($file.seed).unwrap_or(0),
        )?;
        let mut manifest = RunManifest::start($name, $cli.config.as_deref(), &ctx, &args)?;
        let result = $run(&ctx, &args);
        manifest.finish(&ctx, &result)?;
        result
    }};
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let name = cli.command.name();
    match &cli.command {
        Command::GenData(a) => dispatch!(cli, file, name, a, commands::data::run),
        Command::Train(a) => dispatch!(cli, file, name, a, commands::train::run),
        Command::Fit(a) => dispatch!(cli, file, name, a, commands::latent::fit),
        Command::Complete(a) => dispatch!(cli, file, name, a, commands::latent::complete),
        Command::Sample(a) => dispatch!(cli, file, name, a, commands::latent::sample),
        Command::Interpolate(a) => dispatch!(cli, file, name, a, commands::latent::interpolate),
        Command::Rotate(a) => dispatch!(cli, file, name, a, commands::latent::rotate),
        Command::Invert(a) => dispatch!(cli, file, name, a, commands::invert::run),
        Command::BaselineFit(a) => dispatch!(cli, file, name, a, commands::baseline::run),
        Command::Eval(a) => dispatch!(cli, file, name, a, commands::eval::run),
        Command::Audit(a) => dispatch!(cli, file, name, a, commands::audit::run),
    }
}

/// Flag, then config file, then environment, then `./out`.
fn out_dir(cli: &Cli, file: &ConfigFile) -> anyhow::Result<PathBuf> {
    if let Some(p) = &cli.out {
        return Ok(p.clone());
    }
    if let Some(p) = &file.out {
        return Ok(p.clone());
    }
    match std::env::var_os(OUT_ENV) {
        Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
        _ => Ok(PathBuf::from("out")),
    }
}
