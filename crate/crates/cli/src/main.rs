use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::Parser;

use viewshift::error::Error;
use viewshift::runner::{self, Device, RunOptions, Subcommand};

/// 3D-aware multi-class image-to-image translation workflow.
///
/// Stages compose inside one run directory:
/// synth-data -> pretrain -> finetune -> train-adaptor -> translate -> eval.
#[derive(Parser)]
#[command(name = "viewshift", version, about, verbatim_doc_comment)]
struct Cli {
    /// One of: synth-data, pretrain, finetune, train-adaptor, translate,
    /// eval, orbit.
    subcommand: String,

    /// JSON run configuration (defaults apply when omitted).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-path config override, e.g. --override pretrain.steps=10
    /// (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Run directory for artifacts.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,

    /// cpu or accelerator (falls back to cpu).
    #[arg(long, value_name = "DEVICE", default_value = "cpu")]
    device: String,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    raw.iter()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| {
                    Error::Config(format!("override '{item}' is not of the form KEY=VALUE"))
                })
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<(), Error> {
        let sub = Subcommand::from_str(&cli.subcommand)?;
        let device = Device::from_str(&cli.device)?;
        let overrides = parse_overrides(&cli.overrides)?;
        runner::run(
            sub,
            &RunOptions {
                config: cli.config.clone(),
                overrides,
                out: cli.out.clone(),
                device,
            },
        )
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", cli.subcommand);
            ExitCode::from(1)
        }
    }
}
