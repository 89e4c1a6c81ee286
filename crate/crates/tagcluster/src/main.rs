use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tagcluster::pipeline::{run_ablation, run_stage, PipelineConfig, Stage, StageOutcome};

/// Semi-supervised POS tagging with task-specific word clusters.
#[derive(Parser)]
#[command(name = "tagcluster", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the work directory from the config file.
    #[arg(long)]
    workdir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline tagger on the annotated corpus.
    TrainBaseline(StageArgs),
    /// Tag the raw corpus with the baseline tagger, in shards.
    TagRaw(StageArgs),
    /// Collect per-word tag counts and build distribution tables.
    CollectStats(StageArgs),
    /// Build the task-specific and distributional cluster maps.
    Cluster(StageArgs),
    /// Retrain the tagger with the configured feature subset.
    TrainFinal(StageArgs),
    /// Evaluate the final tagger on every eval corpus.
    Evaluate(StageArgs),
    /// Train and evaluate every feature subset and write the comparison.
    Ablation(StageArgs),
}

fn load_config(args: &StageArgs) -> tagcluster::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(workdir) = &args.workdir {
        cfg.workdir = workdir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> tagcluster::Result<()> {
    let (args, stage) = match &cli.command {
        Command::TrainBaseline(a) => (a, Some(Stage::TrainBaseline)),
        Command::TagRaw(a) => (a, Some(Stage::TagRaw)),
        Command::CollectStats(a) => (a, Some(Stage::CollectStats)),
        Command::Cluster(a) => (a, Some(Stage::Cluster)),
        Command::TrainFinal(a) => (a, Some(Stage::TrainFinal)),
        Command::Evaluate(a) => (a, Some(Stage::Evaluate)),
        Command::Ablation(a) => (a, None),
    };
    let cfg = load_config(args)?;
    let (name, outcome) = match stage {
        Some(stage) => (stage.as_str(), run_stage(&cfg, stage)?),
        None => ("ablation", run_ablation(&cfg)?),
    };
    match outcome {
        StageOutcome::Ran => println!("{name}: done"),
        StageOutcome::UpToDate => println!("{name}: up to date"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
