//! Command-line front end: layered configuration, per-run manifests and
//! one function per subcommand.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod summary;

use std::collections::BTreeMap;
use std::fs;

use agenet::io::sha256_hex;
use anyhow::{Context, Result};

use crate::args::{Cli, Command, HpoCommand};
use crate::commands::Ctx;
use crate::config::{resolve, Config, ConfigError, Layers};
use crate::error::CliError;
use crate::manifest::{checksum_tree, unix_now, RunManifest, MANIFEST_FILE};

/// Collects the configuration layers for `cli` with the given environment.
pub fn layers(cli: &Cli, env: BTreeMap<String, String>) -> Result<Layers> {
    let base = match &cli.replay {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::MissingArtifact {
                    path: p.clone(),
                    producer: "<command being replayed>",
                }
                .into());
            }
            Some(serde_json::to_value(RunManifest::load(p)?.config)?)
        }
        None => None,
    };
    let file = match &cli.config {
        Some(p) => Some(
            fs::read_to_string(p)
                .map_err(|e| ConfigError::new("--config", format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    Ok(Layers {
        base,
        file,
        env,
        flags: cli.overrides(),
    })
}

/// Resolves the configuration of `cli` against the process environment.
pub fn resolve_config(cli: &Cli) -> Result<Config> {
    Ok(resolve(&layers(cli, Layers::from_process_env())?)?)
}

/// Run directory name derived from the command and everything that
/// configures it.
pub fn default_run_id(cli: &Cli, config: &Config) -> String {
    let text = format!(
        "{}\n{}\n{:?}",
        cli.command_name(),
        serde_json::to_string(config).expect("config json"),
        cli.command
    );
    format!("{}-{}", cli.command_name(), &sha256_hex(text.as_bytes())[..8])
}

pub fn run(cli: Cli) -> Result<()> {
    run_with_args(cli, std::env::args().collect())
}

pub fn run_with_args(cli: Cli, argv: Vec<String>) -> Result<()> {
    let config = resolve_config(&cli)?;
    let run_id = cli.run_id.clone().unwrap_or_else(|| default_run_id(&cli, &config));
    let dir = config.runs_dir.join(&run_id);
    let resuming = matches!(&cli.command, Command::Train(a) if a.resume);
    if dir.join(MANIFEST_FILE).exists() && !cli.force && !resuming {
        return Err(CliError::Exists { dir }.into());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    log::info!("run {run_id} in {}", dir.display());

    let started = unix_now();
    let mut ctx = Ctx {
        config,
        run_id,
        dir,
        force: cli.force,
        inputs: BTreeMap::new(),
    };
    match &cli.command {
        Command::Prepare(a) => commands::prepare(&mut ctx, a),
        Command::Split(a) => commands::split(&mut ctx, a),
        Command::Train(a) => commands::train(&mut ctx, a),
        Command::HpoSearch(a) | Command::Hpo { command: HpoCommand::Search(a) } => commands::hpo_search(&mut ctx, a),
        Command::HpoFinalize(a) | Command::Hpo { command: HpoCommand::Finalize(a) } => {
            commands::hpo_finalize(&mut ctx, a)
        }
        Command::Evaluate(a) => commands::evaluate(&mut ctx, a),
        Command::Export(a) => commands::export(&mut ctx, a),
        Command::Parity(a) => commands::parity(&mut ctx, a),
        Command::Bench(a) => commands::bench(&mut ctx, a),
        Command::Report => commands::report(&mut ctx),
    }?;

    let manifest = RunManifest {
        run_id: ctx.run_id.clone(),
        command: cli.command_name().to_string(),
        args: argv,
        seeds: ctx.config.seeds(),
        config: ctx.config.clone(),
        inputs: ctx.inputs.clone(),
        artifacts: checksum_tree(&ctx.dir)?,
        started_unix: started,
        finished_unix: unix_now(),
        tool_version: manifest::TOOL_VERSION.to_string(),
    };
    manifest.save(&ctx.dir)?;
    println!("run {} written to {}", ctx.run_id, ctx.dir.display());
    Ok(())
}
