//! `medorder` CLI: stats, extract, evaluate, and audit subcommands over a
//! single TOML config with flag overrides.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use medorder::audit::audit_predictions;
use medorder::config::RunConfig;
use medorder::corpus::{corpus_stats, load_corpus, LoadRole};
use medorder::llm::{Backend, DecodeParams, EndpointConfig};
use medorder::parser::Predictions;
use medorder::pipeline::{run_extract, ExtractOptions};
use medorder::promptkit::{PromptConfig, ShotMode, DEFAULT_SYSTEM_TEMPLATE};
use medorder::scorer::score_corpus;

#[derive(Parser)]
#[command(name = "medorder", version, about = "Medical order extraction and scoring")]
struct Cli {
    /// Path to a TOML config file; flags override config values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile a corpus file: encounter, turn, token, and order counts.
    Stats(StatsArgs),
    /// Run the extraction pipeline and write a predictions file.
    Extract(ExtractArgs),
    /// Score a predictions file against a gold corpus.
    Evaluate(EvaluateArgs),
    /// Audit a predictions file for schema violations and groundedness.
    Audit(AuditArgs),
}

#[derive(Args)]
struct StatsArgs {
    /// Corpus file to profile.
    #[arg(long)]
    corpus: PathBuf,

    /// Emit machine-readable JSON only.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExtractArgs {
    /// Corpus file to extract from.
    #[arg(long)]
    corpus: PathBuf,

    /// Completion backend.
    #[arg(long, value_parser = ["endpoint", "mock", "replay"])]
    backend: Option<String>,

    /// Number of in-context exemplars (0 or 1).
    #[arg(long)]
    shots: Option<u8>,

    /// Explicit exemplar encounter id for few-shot mode.
    #[arg(long)]
    exemplar_id: Option<String>,

    /// Corpus file to draw the few-shot exemplar from (defaults to the
    /// extraction corpus).
    #[arg(long)]
    exemplar_corpus: Option<PathBuf>,

    /// Output directory for predictions.json and run_manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Maximum encounters in flight.
    #[arg(long)]
    jobs: Option<usize>,

    /// Replay store path (replay backend).
    #[arg(long)]
    replay_path: Option<PathBuf>,

    /// Endpoint URL (endpoint backend).
    #[arg(long)]
    url: Option<String>,

    /// Model name (endpoint backend).
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions file to score.
    #[arg(long)]
    predictions: PathBuf,

    /// Gold corpus file.
    #[arg(long)]
    gold: PathBuf,

    /// Emit machine-readable JSON only.
    #[arg(long)]
    json: bool,

    /// Include per-encounter reports in JSON output.
    #[arg(long)]
    per_encounter: bool,
}

#[derive(Args)]
struct AuditArgs {
    /// Predictions file to audit.
    #[arg(long)]
    predictions: PathBuf,

    /// Corpus file with the transcripts (gold orders not required).
    #[arg(long)]
    corpus: PathBuf,

    /// Emit machine-readable JSON only.
    #[arg(long)]
    json: bool,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus, LoadRole::WithGold)?;
    let stats = corpus_stats(&corpus)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
        return Ok(());
    }
    println!("encounters        {}", stats.encounter_count);
    println!("mean_turns        {:.1}", stats.mean_turns);
    println!("max_turns         {}", stats.max_turns);
    for (ty, count) in &stats.orders_by_type {
        println!("orders[{ty}]  {count}");
    }
    for (speaker, count) in &stats.turns_by_speaker {
        println!(
            "{speaker}: {count} turns, {} tokens",
            stats.tokens_by_speaker.get(speaker).unwrap_or(&0)
        );
    }
    println!("missing_reason    {:.1}%", stats.missing_reason_fraction * 100.0);
    println!("mean_prov_span    {:.2}", stats.mean_provenance_span);
    Ok(())
}

fn resolve_backend(config: &RunConfig, args: &ExtractArgs) -> Result<Backend> {
    let kind = args
        .backend
        .clone()
        .or_else(|| config.backend.kind.clone())
        .unwrap_or_else(|| "mock".into());
    match kind.as_str() {
        "mock" => Ok(Backend::Mock),
        "replay" => {
            let path = args
                .replay_path
                .clone()
                .or_else(|| config.backend.replay_path.clone())
                .context("replay backend requires --replay-path or backend.replay_path")?;
            Ok(Backend::Replay(path))
        }
        "endpoint" => {
            let url = args
                .url
                .clone()
                .or_else(|| config.backend.url.clone())
                .context("endpoint backend requires --url or backend.url")?;
            let model = args
                .model
                .clone()
                .or_else(|| config.backend.model.clone())
                .context("endpoint backend requires --model or backend.model")?;
            let mut endpoint = EndpointConfig::new(url, model);
            if let Some(env) = &config.backend.api_key_env {
                endpoint.api_key_env = env.clone();
            }
            endpoint.request_timeout = Duration::from_secs(
                (config.decode.max_new_tokens as u64 / 4).clamp(60, 600),
            );
            Ok(Backend::Endpoint(endpoint))
        }
        other => bail!("unknown backend kind {other:?}"),
    }
}

fn build_prompt_config(config: &RunConfig, args: &ExtractArgs) -> Result<PromptConfig> {
    let shots = args.shots.unwrap_or(config.prompt.shots);
    let shot_mode = match shots {
        0 => ShotMode::Zero,
        1 => ShotMode::Few,
        other => bail!("--shots must be 0 or 1, got {other}"),
    };
    let system_instruction = match &config.prompt.system_template {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading system template {}", path.display()))?,
        None => DEFAULT_SYSTEM_TEMPLATE.to_string(),
    };
    Ok(PromptConfig {
        shot_mode,
        exemplar_encounter_id: args
            .exemplar_id
            .clone()
            .or_else(|| config.prompt.exemplar_id.clone()),
        system_instruction,
        token_budget: config.prompt.token_budget,
        truncate_on_overflow: config.prompt.truncate_on_overflow,
    })
}

/// Exit 0 on full success, 1 when some encounters failed.
fn cmd_extract(config: &RunConfig, args: &ExtractArgs) -> Result<u8> {
    let corpus = load_corpus(&args.corpus, LoadRole::WithGold)?;
    let exemplar_corpus = match &args.exemplar_corpus {
        Some(path) => Some(load_corpus(path, LoadRole::WithGold)?),
        None => None,
    };
    let backend = resolve_backend(config, args)?;
    let prompt = build_prompt_config(config, args)?;
    let params: DecodeParams = config.decode.clone();
    let jobs = args.jobs.unwrap_or(config.run.jobs).max(1);

    let options = ExtractOptions {
        prompt,
        params,
        jobs,
        exemplar_corpus: exemplar_corpus.as_deref(),
    };
    let run = run_extract(&corpus, backend, &options)?;

    let out_dir = args.out.clone().unwrap_or_else(|| config.run.out_dir.clone());
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let predictions_path = out_dir.join("predictions.json");
    run.predictions.save(&predictions_path)?;
    std::fs::write(out_dir.join("run_manifest.json"), run.manifest.to_json())?;

    eprintln!(
        "extracted {} encounters ({} failed, {} repaired lines, {} discarded lines) -> {}",
        run.manifest.encounter_count,
        run.manifest.failed_count,
        run.manifest.repaired_lines,
        run.manifest.discarded_lines,
        predictions_path.display()
    );
    for failure in &run.manifest.failures {
        eprintln!("  failed {}: {}", failure.id, failure.error);
    }
    Ok(if run.manifest.failed_count > 0 { 1 } else { 0 })
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let predictions = Predictions::load(&args.predictions)?;
    let gold = load_corpus(&args.gold, LoadRole::WithGold)?;
    let score = score_corpus(&predictions, &gold)?;
    if args.json {
        if args.per_encounter {
            println!("{}", serde_json::to_string_pretty(&score)?);
        } else {
            println!("{}", serde_json::to_string_pretty(&score.overall)?);
        }
        return Ok(());
    }
    print!("{}", score.overall.render_table());
    Ok(())
}

fn cmd_audit(args: &AuditArgs) -> Result<()> {
    let predictions = Predictions::load(&args.predictions)?;
    let corpus = load_corpus(&args.corpus, LoadRole::WithGold)?;
    let report = audit_predictions(&predictions, &corpus)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    print!("{}", report.render_table());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let config = match load_config(cli.config.as_ref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Stats(args) => cmd_stats(args).map(|()| 0),
        Command::Extract(args) => cmd_extract(&config, args),
        Command::Evaluate(args) => cmd_evaluate(args).map(|()| 0),
        Command::Audit(args) => cmd_audit(args).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
