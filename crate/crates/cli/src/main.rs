use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use corpusalign::miner::EmbedInput;
use corpusalign::pipeline::config::AgreementSpec;
use corpusalign::pipeline::{
    load_bundle, run_agreement, MergeOverrides, Pipeline, PipelineError, RunOptions, Stage, Taxonomies,
};
use corpusalign::taxonomy::Dimension;

#[derive(Parser)]
#[command(name = "corpusalign", version, about = "Corpus taxonomy mining and distribution alignment")]
struct Cli {
    /// Pipeline configuration (JSON). Relative paths inside it resolve against its directory.
    #[arg(long, short, global = true, default_value = "corpusalign.json")]
    config: PathBuf,
    /// Working directory for stage outputs (overrides the config).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Seed for resampling (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report what would run without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct MergeArgs {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    theta_mean: Option<f64>,
    #[arg(long)]
    theta_max: Option<f64>,
    /// Text embedded per topic: "label" or "label+explanation".
    #[arg(long, value_parser = parse_embed_input)]
    embed_input: Option<EmbedInput>,
    /// Continue an interrupted merge from its checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Clone)]
struct AgreeArgs {
    /// Annotator A file; with --b, runs without a pipeline config.
    #[arg(long, requires = "b")]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// Label universe: JSON array of codes or a taxonomy file.
    #[arg(long)]
    universe: Option<PathBuf>,
    #[arg(long, value_parser = parse_dimension, default_value = "topic")]
    dimension: Dimension,
    #[arg(long, default_value_t = corpusalign::agreement::DEFAULT_ROUNDS)]
    rounds: usize,
    #[arg(long, default_value_t = corpusalign::agreement::DEFAULT_LEVEL)]
    level: f64,
    /// Write the report here instead of stdout (standalone mode only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Read raw dataset files into the corpus store.
    Ingest,
    /// Apply the relevance filter to datasets that request it.
    Filter,
    /// Generate free-form topics per sample and embed them.
    Mine,
    /// Consolidate mined topics into a merge tree.
    Merge(MergeArgs),
    /// Map samples onto the topic taxonomy.
    Reassign,
    /// Label samples with intent and form codes.
    Classify,
    /// Compute distributions, similarities, divergences and cross tables.
    Analyze,
    /// Inter-annotator agreement with bootstrap intervals.
    Agree(AgreeArgs),
    /// Write the explorer bundle.
    Export,
    /// Run every stage in order.
    All(MergeArgs),
    /// Check a bundle's manifest hashes.
    VerifyBundle { dir: PathBuf },
}

fn parse_embed_input(s: &str) -> Result<EmbedInput, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected label or label+explanation, got {s:?}"))
}

fn parse_dimension(s: &str) -> Result<Dimension, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected topic, intent or form, got {s:?}"))
}

fn overrides(m: &MergeArgs) -> MergeOverrides {
    MergeOverrides {
        batch_size: m.batch_size,
        theta_mean: m.theta_mean,
        theta_max: m.theta_max,
        embed_input: m.embed_input,
        resume: m.resume,
    }
}

fn standalone_agree(cli: &Cli, args: &AgreeArgs) -> Result<()> {
    let spec = AgreementSpec {
        annotator_a: args.a.clone().expect("checked"),
        annotator_b: args.b.clone().expect("checked"),
        universe: args.universe.clone(),
        dimension: args.dimension,
        rounds: args.rounds,
        level: args.level,
    };
    let out = run_agreement(&spec, cli.seed.unwrap_or(0), &Taxonomies::builtin())?;
    let text = serde_json::to_string_pretty(&out)?;
    match &args.out {
        Some(p) => corpusalign::io::write_atomic(p, format!("{text}\n").as_bytes())
            .with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Agree(args) = &cli.command {
        if args.a.is_some() {
            return standalone_agree(cli, args);
        }
    }
    if let Command::VerifyBundle { dir } = &cli.command {
        let m = load_bundle(dir)?;
        println!("bundle {} ok: {} artifacts", m.run_id, m.artifacts.len());
        return Ok(());
    }
    let merge = match &cli.command {
        Command::Merge(m) | Command::All(m) => overrides(m),
        _ => MergeOverrides::default(),
    };
    let options = RunOptions {
        workdir: cli.workdir.clone(),
        seed: cli.seed,
        dry_run: cli.dry_run,
        merge,
    };
    let pipeline = Pipeline::from_file(&cli.config, options)?;
    let stages = match &cli.command {
        Command::Ingest => vec![Stage::Ingest],
        Command::Filter => vec![Stage::Filter],
        Command::Mine => vec![Stage::Mine],
        Command::Merge(_) => vec![Stage::Merge],
        Command::Reassign => vec![Stage::Reassign],
        Command::Classify => vec![Stage::Classify],
        Command::Analyze => vec![Stage::Analyze],
        Command::Agree(_) => vec![Stage::Agree],
        Command::Export => vec![Stage::Export],
        Command::All(_) => pipeline.all_stages(),
        Command::VerifyBundle { .. } => unreachable!(),
    };
    for report in pipeline.run(&stages)? {
        println!("{}", serde_json::to_string(&report)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
