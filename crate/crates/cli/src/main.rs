//! `anchor`: dataset generation, prior pretraining, per-domain anchoring,
//! translation, sampling and evaluation over an on-disk registry.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anchor_core::AnchorError;
use clap::{Args, Parser, Subcommand};

use config::ConfigError;

pub const REGISTRY_ENV: &str = "ANCHOR_REGISTRY";

#[derive(Parser, Debug)]
#[command(
    name = "anchor",
    version,
    about = "Latent space anchoring for domain-scalable image translation"
)]
#[command(
    after_help = "Exit codes: 0 ok, 2 config, 3 I/O, 4 overwrite refused, 5 registry/domain, \
6 unsupported spec, 7 training failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug, Clone)]
pub struct RegistryArg {
    /// Registry directory
    #[arg(long, env = REGISTRY_ENV)]
    pub registry: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-domain dataset
    GenData(commands::GenData),
    /// Pretrain the generator prior and initialize a registry around it
    Pretrain(commands::Pretrain),
    /// Anchor a new domain to the registry's prior
    TrainDomain(commands::TrainDomain),
    /// Translate an image between registered domains
    Translate(commands::Translate),
    /// Decode one shared latent into every requested domain
    Sample(commands::Sample),
    /// Resample the late latent slots of an encoded image
    Mix(commands::Mix),
    /// Score a translation direction on paired eval data
    Evaluate(commands::Evaluate),
    /// Dump pre-ToRGB feature channels as a grayscale grid
    InspectFeatures(commands::InspectFeatures),
    /// List registered domains
    ListDomains(commands::ListDomains),
}

fn anchor_code(e: &AnchorError) -> u8 {
    match e.root() {
        AnchorError::Config(_) | AnchorError::Domain(_) | AnchorError::Contract(_) => 2,
        AnchorError::Io { .. }
        | AnchorError::Image { .. }
        | AnchorError::Format { .. }
        | AnchorError::Data(_) => 3,
        AnchorError::Overwrite(_) => 4,
        AnchorError::Conflict(_)
        | AnchorError::NotFound(_)
        | AnchorError::Corruption { .. }
        | AnchorError::FingerprintMismatch { .. }
        | AnchorError::Integrity(_)
        | AnchorError::Locked(_) => 5,
        AnchorError::Unsupported(_) | AnchorError::Spec(_) => 6,
        AnchorError::Training { .. } | AnchorError::Numerical(_) => 7,
        AnchorError::Chain { .. } => 1,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<AnchorError>() {
            return anchor_code(e);
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::TrainDomain(a) => commands::train_domain(a),
        Command::Translate(a) => commands::translate(a),
        Command::Sample(a) => commands::sample(a),
        Command::Mix(a) => commands::mix(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::InspectFeatures(a) => commands::inspect_features(a),
        Command::ListDomains(a) => commands::list_domains(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
