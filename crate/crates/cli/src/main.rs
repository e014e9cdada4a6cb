//! `coeforge`: score, evaluate, and prepare Chain-of-Evidence trajectories.
//!
//! Exit status: 0 on success, 1 on schema or usage errors, 2 when the encoder
//! stayed unreachable for at least one sample (the report is still written).

mod config;
mod world;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coeforge::embedding::{EvidenceEncoder, RemoteEncoder, RemoteEncoderConfig};
use coeforge::evalset::{
    self, cold_start_filter, read_jsonl, write_jsonl, write_jsonl_with_config, ColdStartCandidate,
    GroundTruthIndex, PredictionRecord, RunConfig, SourceRecord, CANDIDATES_SCHEMA, DATASET_SCHEMA,
    PREDICTIONS_SCHEMA, REJECTIONS_SCHEMA, SCORE_SCHEMA, SOURCES_SCHEMA, TRACE_SCHEMA,
};
use coeforge::grpo::{run_simulation, SimulationParams, SyntheticWorld};
use coeforge::imaging::{ImageEvidenceEncoder, MockPageEncoder, PageResolver};
use coeforge::parser::ParseOptions;
use coeforge::rewards::RewardEngine;
use coeforge::{GroundTruthRecord, RewardConfig};
use serde::Serialize;

use crate::config::{EncoderSpec, FileConfig, RewardArgs};

#[derive(Debug, Parser)]
#[command(
    name = "coeforge",
    version,
    about = "Score and evaluate Chain-of-Evidence trajectories"
)]
struct Cli {
    /// TOML config file; command-line flags take precedence over it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads and encoder requests in flight
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every prediction with the four rewards (JSONL report)
    Score(ScoreArgs),
    /// Compute EM, IoU@0.5, SA and no-answer accuracy (JSON report)
    Evaluate(ScoreArgs),
    /// Keep cold-start candidates whose answer recall reaches gamma
    Filter(FilterArgs),
    /// Build multi-page candidate sets from single-page examples
    BuildCandidates(BuildArgs),
    /// Run the template-policy training simulator
    TrainSim(TrainArgs),
    /// Write the synthetic world, its pages, dataset and predictions
    ExportWorld(ExportArgs),
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Encoder URL or mock:<dim> [default: mock:256]
    #[arg(long)]
    encoder: Option<String>,
    /// Reward components to zero out, comma separated (acc, step, ground, format)
    #[arg(long)]
    ablate: Option<String>,
    /// Treat an answer box missing from the chain as a format error
    #[arg(long)]
    strict_answer_in_chain: bool,
    /// Directory page locators resolve against [default: the dataset's directory]
    #[arg(long)]
    pages_dir: Option<PathBuf>,
    /// Directory holding sha256-addressed page blobs
    #[arg(long)]
    blob_dir: Option<PathBuf>,
    #[command(flatten)]
    reward: RewardArgs,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write dropped candidates and their reasons
    #[arg(long)]
    rejected: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long)]
    sources: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pages per candidate set
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 0.2)]
    no_answer_prob: f64,
    /// Base seed; record i uses seed + i [default: 3407]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// World JSON as written by export-world [default: built-in world]
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// [default: 3407]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    ablate: Option<String>,
    #[command(flatten)]
    reward: RewardArgs,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    world: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let retriable = e.chain().any(|c| {
                c.downcast_ref::<coeforge::Error>()
                    .is_some_and(coeforge::Error::is_retriable)
            });
            ExitCode::from(if retriable { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let threads = config::resolve_concurrency(cli.concurrency, &file)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("starting worker pool")?;
    pool.install(|| match cli.command {
        Command::Score(a) => cmd_score(&a, &file, threads),
        Command::Evaluate(a) => cmd_evaluate(&a, &file, threads),
        Command::Filter(a) => cmd_filter(&a, &file),
        Command::BuildCandidates(a) => cmd_build(&a, &file),
        Command::TrainSim(a) => cmd_train(&a, &file),
        Command::ExportWorld(a) => cmd_export(&a),
    })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

struct ScoringSetup {
    gts: GroundTruthIndex,
    preds: Vec<PredictionRecord>,
    encoder: Box<dyn EvidenceEncoder>,
    engine: RewardEngine,
    run: RunConfig,
}

fn setup_scoring(a: &ScoreArgs, file: &FileConfig, threads: usize) -> Result<ScoringSetup> {
    let cfg = a.reward.resolve(file)?;
    let ablation = config::resolve_ablation(a.ablate.as_deref(), file)?;
    let strict = a.strict_answer_in_chain || file.strict_answer_in_chain.unwrap_or(false);
    let engine = RewardEngine::new(cfg)
        .with_ablation(ablation)
        .with_parse_options(ParseOptions {
            strict_answer_in_chain: strict,
        });

    let records: Vec<GroundTruthRecord> = read_jsonl(&a.dataset, DATASET_SCHEMA)?;
    let gts = GroundTruthIndex::new(records)?;
    let preds: Vec<PredictionRecord> = read_jsonl(&a.predictions, PREDICTIONS_SCHEMA)?;
    gts.resolve_all(&preds)?;

    let base = match &a.pages_dir {
        Some(d) => d.clone(),
        None => a
            .dataset
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let mut resolver = PageResolver::new(base);
    if let Some(b) = &a.blob_dir {
        resolver = resolver.with_blob_dir(b);
    }
    let spec = config::resolve_encoder(a.encoder.as_deref(), file);
    let encoder: Box<dyn EvidenceEncoder> = match EncoderSpec::parse(&spec)? {
        EncoderSpec::Mock(dim) => Box::new(MockPageEncoder::new(dim, resolver)?),
        EncoderSpec::Remote(url) => {
            let rc = RemoteEncoderConfig {
                max_in_flight: threads,
                timeout: Duration::from_secs(30),
                ..RemoteEncoderConfig::new(url)
            };
            Box::new(ImageEvidenceEncoder::new(RemoteEncoder::new(rc), resolver))
        }
    };
    let run = RunConfig::new(spec, &engine);
    Ok(ScoringSetup {
        gts,
        preds,
        encoder,
        engine,
        run,
    })
}

fn exit_for(provider_failed: bool) -> ExitCode {
    if provider_failed {
        eprintln!("error: encoder unavailable for some samples; see the report's error fields");
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_score(a: &ScoreArgs, file: &FileConfig, threads: usize) -> Result<ExitCode> {
    let s = setup_scoring(a, file, threads)?;
    let rows = evalset::score_predictions(&s.preds, &s.gts, s.encoder.as_ref(), &s.engine)?;
    write_jsonl_with_config(create(&a.out)?, SCORE_SCHEMA, Some(&s.run), &rows)?;
    let failed = rows
        .iter()
        .any(|r| r.error.as_ref().is_some_and(|e| e.retriable));
    Ok(exit_for(failed))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"))
}

fn cmd_evaluate(a: &ScoreArgs, file: &FileConfig, threads: usize) -> Result<ExitCode> {
    let s = setup_scoring(a, file, threads)?;
    let report = evalset::evaluate(&s.preds, &s.gts, s.encoder.as_ref(), &s.engine, s.run)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "n={} em={} iou@{}={} sa={} no_answer={} errors={}",
        report.n_total,
        fmt_opt(report.em),
        s.engine.cfg.iou_at,
        fmt_opt(report.iou_at_05),
        fmt_opt(report.sa),
        fmt_opt(report.no_answer_accuracy),
        report.n_errors
    );
    Ok(exit_for(report.has_provider_errors()))
}

fn cmd_filter(a: &FilterArgs, file: &FileConfig) -> Result<ExitCode> {
    let gamma = a
        .gamma
        .or(file.reward.gamma)
        .unwrap_or(RewardConfig::default().gamma);
    if !(0.0..=1.0).contains(&gamma) {
        bail!("gamma {gamma} must lie in [0, 1]");
    }
    let cands: Vec<ColdStartCandidate> = read_jsonl(&a.candidates, CANDIDATES_SCHEMA)?;
    let out = cold_start_filter(&cands, gamma);
    write_jsonl(create(&a.out)?, CANDIDATES_SCHEMA, &out.kept)?;
    match &a.rejected {
        Some(p) => write_jsonl(create(p)?, REJECTIONS_SCHEMA, &out.dropped)?,
        None => {
            for d in &out.dropped {
                eprintln!("dropped {}: {}", d.query_id, d.reason);
            }
        }
    }
    println!(
        "kept {} of {} candidates (gamma {gamma})",
        out.kept.len(),
        cands.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_build(a: &BuildArgs, file: &FileConfig) -> Result<ExitCode> {
    let seed = a.seed.or(file.seed).unwrap_or(config::DEFAULT_SEED);
    let sources: Vec<SourceRecord> = read_jsonl(&a.sources, SOURCES_SCHEMA)?;
    let records = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.build(a.m, a.no_answer_prob, seed.wrapping_add(i as u64))
                .with_context(|| format!("building candidates for {}", s.query_id))
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(create(&a.out)?, DATASET_SCHEMA, &records)?;
    let none = records.iter().filter(|r| !r.is_answerable()).count();
    println!(
        "wrote {} records ({none} without the source page)",
        records.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_world(path: Option<&Path>) -> Result<SyntheticWorld> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing world {}", p.display()))
        }
        None => Ok(SyntheticWorld::default()),
    }
}

#[derive(Serialize)]
struct TraceConfig<'a> {
    reward: &'a RewardConfig,
    steps: usize,
    seed: u64,
    group_size: usize,
    learning_rate: f64,
    temperature: f64,
    ablation: String,
    templates: &'a [String],
}

fn cmd_train(a: &TrainArgs, file: &FileConfig) -> Result<ExitCode> {
    let world = load_world(a.world.as_deref())?;
    let cfg = a.reward.resolve(file)?;
    let defaults = SimulationParams::default();
    let params = SimulationParams {
        steps: a.steps,
        seed: a.seed.or(file.seed).unwrap_or(config::DEFAULT_SEED),
        group_size: a.group_size,
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        temperature: a.temperature,
        ablation: config::resolve_ablation(a.ablate.as_deref(), file)?,
    };
    let trace = run_simulation(&world, &cfg, &params)?;
    let meta = TraceConfig {
        reward: &cfg,
        steps: params.steps,
        seed: params.seed,
        group_size: params.group_size,
        learning_rate: params.learning_rate,
        temperature: params.temperature,
        ablation: params.ablation.to_string(),
        templates: &trace.templates,
    };
    write_jsonl_with_config(
        create(&a.out)?,
        TRACE_SCHEMA,
        Some(&meta),
        &trace.iterations,
    )?;
    let idx = trace
        .templates
        .iter()
        .position(|t| *t == trace.final_modal_template)
        .unwrap_or(0);
    println!(
        "final modal template: {} (p={:.4}); SA pass rate over last 100 iterations: {:.4}",
        trace.final_modal_template,
        trace.final_probabilities[idx],
        trace.tail_sa_rate(100)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(a: &ExportArgs) -> Result<ExitCode> {
    let w = load_world(a.world.as_deref())?;
    w.validate(&RewardConfig::default())?;
    world::export(&w, &a.out)?;
    println!("wrote synthetic world to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}
