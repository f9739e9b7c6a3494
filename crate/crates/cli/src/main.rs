//! `cdscope`: SAE training and context-dependency analysis of ViT patch tokens.
//!
//! Every command reads an optional TOML config (`--config`), applies its own
//! flags on top, and writes each artifact together with a `.manifest.json`
//! recording input hashes, the seed and the effective configuration.
//!
//! Exit status: 0 on success, 1 for invalid input or configuration, 2 when a
//! run fails after validation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::ablation::{Ablate, PartitionCmd, Report};
use commands::analysis::{AwCds, Cds, Instability, SccPlan};
use commands::grid::Emd;
use commands::probe::Probe;
use commands::sae::{EvalSae, TrainSae};
use config::{Invalid, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "cdscope",
    version,
    about = "SAE feature context-dependency toolkit for ViT patch tokens"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Model layer the embeddings came from, recorded in manifests.
    #[arg(long, global = true)]
    layer: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    TrainSae(TrainSae),
    EvalSae(EvalSae),
    SccPlan(SccPlan),
    Cds(Cds),
    Instability(Instability),
    Awcds(AwCds),
    Partition(PartitionCmd),
    Ablate(Ablate),
    Probe(Probe),
    Emd(Emd),
    Report(Report),
}

impl Command {
    fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Command::TrainSae(c) => c.apply(cfg),
            Command::EvalSae(c) => c.apply(cfg),
            Command::SccPlan(c) => c.apply(cfg),
            Command::Cds(c) => c.apply(cfg),
            Command::Instability(c) => c.apply(cfg),
            Command::Awcds(c) => c.apply(cfg),
            Command::Partition(c) => c.apply(cfg),
            Command::Ablate(c) => c.apply(cfg),
            Command::Probe(c) => c.apply(cfg),
            Command::Emd(_) => {}
            Command::Report(c) => c.apply(cfg),
        }
    }

    fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        match self {
            Command::TrainSae(c) => c.run(cfg),
            Command::EvalSae(c) => c.run(cfg),
            Command::SccPlan(c) => c.run(cfg),
            Command::Cds(c) => c.run(cfg),
            Command::Instability(c) => c.run(cfg),
            Command::Awcds(c) => c.run(cfg),
            Command::Partition(c) => c.run(cfg),
            Command::Ablate(c) => c.run(cfg),
            Command::Probe(c) => c.run(cfg),
            Command::Emd(c) => c.run(),
            Command::Report(c) => c.run(cfg),
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    cfg.threads = cli.threads.unwrap_or(cfg.threads);
    if cli.layer.is_some() {
        cfg.layer = cli.layer.clone();
    }
    cli.command.apply(&mut cfg);
    cfg.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()?;
    cli.command.run(&cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<cdscope::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
