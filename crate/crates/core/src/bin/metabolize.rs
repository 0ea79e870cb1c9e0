//! `metabolize` — batch CLI over the dataset-curation engine.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 I/O or judge
//! failure. Diagnostics go to stderr; data goes to files or stdout.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use metabolize::catabolism::{self, BenchmarkRegistry, DiagnosisInputs, IncrementalConfig};
use metabolize::corpus::{self, LineageStamp, QuestionType, Sample, TaskType, VerdictKind};
use metabolize::dedup::{self, DedupConfig};
use metabolize::filters::{run_filter_stage, FilterConfigError, RuleSet, RuleSetSpec};
use metabolize::fingerprint::{derive_seed, fingerprint};
use metabolize::improve::{self, AnswerPatterns, ImproveError, IsolationTemplates};
use metabolize::judge::{ClientPolicy, JudgeClient, JudgeError, API_KEY_ENV, ENDPOINT_ENV};
use metabolize::pipeline::{self, PipelineError, SourceAuditConfig, StagePlan};

#[derive(Parser)]
#[command(
    name = "metabolize",
    version,
    about = "Curate multimodal instruction-tuning corpora: filter, improve, diagnose, plan"
)]
struct Cli {
    /// Worker threads for per-sample parallel stages (default: available
    /// parallelism). Results are identical at any worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Global TOML config (seed, judge endpoint, cache dir).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a corpus file; findings exit 1.
    Ingest(IngestArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
    /// Remove duplicate samples (perceptual image hash + normalized text).
    Dedup(DedupArgs),
    /// Apply the rule catalog (refusals, stray references, repetition, ...).
    Filter(FilterArgs),
    /// Audit each source with a judged sample and emit decisions.
    Audit(AuditArgs),
    /// One-off judge scoring over a corpus.
    #[command(subcommand)]
    Judge(JudgeCommand),
    /// Convert an exact share of voted text-dominant samples to text-only.
    Convert(ConvertArgs),
    /// Answer-improvement operations.
    #[command(subcommand)]
    Improve(ImproveCommand),
    /// Run the full anabolism pipeline from a plan file.
    Run(RunArgs),
    /// Emit next-iteration plans.
    #[command(subcommand)]
    Plan(PlanCommand),
    /// Compare two benchmark CSVs and flag regressions.
    Diagnose(DiagnoseArgs),
    /// Render a diagnosis + ledger into report files.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Re-serialized canonical corpus destination.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validation report JSON destination (default: stdout on findings).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Hamming threshold; 0 clusters exact perceptual matches only.
    #[arg(long, default_value_t = 0)]
    threshold: u32,
    /// File of prompt templates stripped from question text (one per line).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Directory image uris resolve against.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Machine-readable report destination (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    dropped: Option<PathBuf>,
    #[arg(long)]
    quarantined: Option<PathBuf>,
    /// Pinned lineage timestamp (RFC 3339); defaults to now.
    #[arg(long)]
    timestamp: Option<DateTime<Utc>>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rule file (TOML); defaults to the bundled catalog.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    dropped: Option<PathBuf>,
    #[arg(long)]
    flagged: Option<PathBuf>,
    #[arg(long)]
    timestamp: Option<DateTime<Utc>>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Judge model scoring the sampled records.
    #[arg(long, default_value = "audit-judge")]
    model: String,
    #[arg(long, default_value_t = 0.8)]
    t_keep: f64,
    #[arg(long, default_value_t = 0.5)]
    t_drop: f64,
    /// Audit findings JSON destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum JudgeCommand {
    /// Score image-question relevance for samples with images.
    Relevance(JudgeRunArgs),
    /// Binary quality scoring for long-form samples.
    Quality(JudgeRunArgs),
    /// Three-model text-only answerability vote.
    Vote(VoteArgs),
}

#[derive(Args)]
struct JudgeRunArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Verdicts JSONL destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "judge-model")]
    model: String,
}

#[derive(Args)]
struct VoteArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exactly three distinct model ids, comma-separated.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, default_value_t = 3)]
    trials: u32,
}

#[derive(Args)]
struct ConvertArgs {
    /// Corpus of samples already voted text-dominant.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.70)]
    fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    timestamp: Option<DateTime<Utc>>,
}

#[derive(Subcommand)]
enum ImproveCommand {
    /// Append task-format directives to non-free-form questions.
    Isolate(IsolateArgs),
    /// Rewrite short answers into detailed responses on a seeded cohort.
    Rewrite(RewriteArgs),
    /// Generate chain-of-thought answers gated by rejection sampling.
    Cot(CotArgs),
}

#[derive(Args)]
struct IsolateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Isolation template TOML; defaults to the bundled set.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    timestamp: Option<DateTime<Utc>>,
}

#[derive(Args)]
struct RewriteArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    generator: String,
    #[arg(long)]
    verifier: String,
    #[arg(long)]
    timestamp: Option<DateTime<Utc>>,
}

#[derive(Args)]
struct CotArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    generator: String,
    /// Required for free-form questions; must differ from the generator.
    #[arg(long)]
    verifier: Option<String>,
    /// Task types to generate for, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "math,knowledge,chart")]
    task_types: Vec<String>,
    #[arg(long)]
    timestamp: Option<DateTime<Utc>>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ledger: PathBuf,
    /// Overrides the plan's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the plan's pinned timestamp.
    #[arg(long)]
    timestamp: Option<DateTime<Utc>>,
    #[arg(long)]
    dropped: Option<PathBuf>,
    #[arg(long)]
    quarantined: Option<PathBuf>,
    /// Review-queue (flagged) samples destination.
    #[arg(long)]
    review: Option<PathBuf>,
    /// Source-audit findings JSON destination.
    #[arg(long)]
    audits: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Incremental-validation mix: blend new data with 5-20% of the old.
    Incremental(PlanIncrementalArgs),
    /// Redundant-data pruning: new-only and downsample experiments.
    Pruning(PlanPruningArgs),
}

#[derive(Args)]
struct PlanIncrementalArgs {
    #[arg(long)]
    new: u64,
    #[arg(long)]
    old: u64,
    #[arg(long, default_value_t = 2.0)]
    k: f64,
    /// Explicit old-data fraction; must lie in [0.05, 0.20].
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, default_value = "master")]
    base_checkpoint: String,
    /// Plan TOML destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanPruningArgs {
    /// Target sources, comma-separated.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    factor: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    current: PathBuf,
    #[arg(long)]
    previous: PathBuf,
    /// Registry TOML; defaults to the bundled registry.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    tolerance: f64,
    /// Supplementary diagnosis inputs (JSON).
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Diagnosis JSON destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    diagnosis: PathBuf,
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Optional TOML config shared across subcommands.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct GlobalConfig {
    seed: Option<u64>,
    judge_endpoint: Option<String>,
    judge_api_key: Option<String>,
    cache_dir: Option<PathBuf>,
    max_in_flight: Option<usize>,
    retry_max: Option<u32>,
    backoff_ms: Option<u64>,
    workers: Option<usize>,
}

enum AppError {
    /// Bad input, bad config, failed validation: exit 1.
    Validation(String),
    /// I/O or judge communication failure: exit 2.
    Runtime(String),
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Validation(m) | AppError::Runtime(m) => m,
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(format!("i/o: {e}"))
    }
}

impl From<corpus::CorpusError> for AppError {
    fn from(e: corpus::CorpusError) -> Self {
        match e {
            corpus::CorpusError::Io(io) => AppError::Runtime(format!("i/o: {io}")),
            other => AppError::Validation(other.to_string()),
        }
    }
}

impl From<JudgeError> for AppError {
    fn from(e: JudgeError) -> Self {
        match e {
            JudgeError::Precondition(_)
            | JudgeError::EndpointMissing
            | JudgeError::PolicyInvalid(_) => AppError::Validation(e.to_string()),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<PipelineError> for AppError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Judge(j) => AppError::from(j),
            PipelineError::Io(io) => AppError::Runtime(format!("i/o: {io}")),
            other => AppError::Validation(other.to_string()),
        }
    }
}

impl From<catabolism::CatabolismError> for AppError {
    fn from(e: catabolism::CatabolismError) -> Self {
        match e {
            catabolism::CatabolismError::Io(io) => AppError::Runtime(format!("i/o: {io}")),
            other => AppError::Validation(other.to_string()),
        }
    }
}

impl From<ImproveError> for AppError {
    fn from(e: ImproveError) -> Self {
        match e {
            ImproveError::Judge(j) => AppError::from(j),
            other => AppError::Validation(other.to_string()),
        }
    }
}

impl From<FilterConfigError> for AppError {
    fn from(e: FilterConfigError) -> Self {
        AppError::Validation(e.to_string())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are successful interactions; anything else is
            // a usage error.
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {}", err.message());
            err.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), AppError> {
    let config = load_config(cli.config.as_deref())?;
    if let Some(workers) = cli.workers.or(config.workers) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| AppError::Validation(format!("--workers: {e}")))?;
    }
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Dedup(args) => cmd_dedup(args, &config),
        Command::Filter(args) => cmd_filter(args),
        Command::Audit(args) => cmd_audit(args, &config),
        Command::Judge(args) => cmd_judge(args, &config),
        Command::Convert(args) => cmd_convert(args, &config),
        Command::Improve(args) => cmd_improve(args, &config),
        Command::Run(args) => cmd_run(args, &config),
        Command::Plan(args) => cmd_plan(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn load_config(path: Option<&Path>) -> Result<GlobalConfig, AppError> {
    let Some(path) = path else { return Ok(GlobalConfig::default()) };
    let body = std::fs::read_to_string(path)?;
    toml::from_str(&body).map_err(|e| AppError::Validation(format!("--config: {e}")))
}

fn judge_client(config: &GlobalConfig) -> Result<JudgeClient, AppError> {
    let endpoint = std::env::var(ENDPOINT_ENV)
        .ok()
        .or_else(|| config.judge_endpoint.clone())
        .ok_or_else(|| {
            AppError::Validation(format!(
                "judge endpoint not configured: set {ENDPOINT_ENV} or judge_endpoint in --config"
            ))
        })?;
    let api_key = std::env::var(API_KEY_ENV).ok().or_else(|| config.judge_api_key.clone());
    let mut policy =
        ClientPolicy { cache_dir: config.cache_dir.clone(), ..ClientPolicy::default() };
    if let Some(n) = config.max_in_flight {
        policy.max_in_flight = n;
    }
    if let Some(n) = config.retry_max {
        policy.retry_max = n;
    }
    if let Some(ms) = config.backoff_ms {
        policy.backoff_base = std::time::Duration::from_millis(ms);
    }
    Ok(JudgeClient::new(endpoint, api_key, policy)?)
}

/// Explicit-seed rule: randomness never comes from the clock.
fn require_seed(seed: Option<u64>, config: &GlobalConfig, what: &str) -> Result<u64, AppError> {
    seed.or(config.seed).ok_or_else(|| {
        AppError::Validation(format!(
            "{what} draws random choices and needs an explicit --seed (or config seed); \
             seeds are never taken from the clock"
        ))
    })
}

fn stamp_for(timestamp: Option<DateTime<Utc>>, config_text: &str) -> LineageStamp {
    LineageStamp::new(timestamp.unwrap_or_else(Utc::now), fingerprint(config_text))
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<(), AppError> {
    let body = serde_json::to_string_pretty(value).expect("serializable");
    match path {
        Some(path) => std::fs::write(path, body + "\n")?,
        None => println!("{body}"),
    }
    Ok(())
}

fn write_jsonl(path: Option<&Path>, lines: &[serde_json::Value]) -> Result<(), AppError> {
    let mut body = String::new();
    for line in lines {
        body.push_str(&line.to_string());
        body.push('\n');
    }
    match path {
        Some(path) => std::fs::write(path, body)?,
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<(), AppError> {
    let samples = corpus::read_corpus(&args.input)?;
    let report = corpus::validate_corpus(samples.iter());
    if !report.is_clean() {
        write_json(args.report.as_deref(), &report)?;
        return Err(AppError::Validation(format!(
            "{} validation issue(s) in {}",
            report.issues.len(),
            args.input.display()
        )));
    }
    if let Some(report_path) = &args.report {
        write_json(Some(report_path), &report)?;
    }
    if let Some(out) = &args.out {
        corpus::write_corpus(out, &samples)?;
    }
    eprintln!("{} samples valid", samples.len());
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), AppError> {
    let samples = corpus::read_corpus(&args.input)?;
    let stats = corpus::corpus_stats(samples.iter());
    write_json(None, &stats)
}

fn cmd_dedup(args: DedupArgs, config: &GlobalConfig) -> Result<(), AppError> {
    let seed = require_seed(args.seed, config, "dedup survivor selection")?;
    let samples = corpus::read_corpus(&args.input)?;
    let prompt_templates = match &args.templates {
        Some(path) => std::fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    let dedup_config = DedupConfig {
        threshold: args.threshold,
        prompt_templates,
        image_root: args.image_root.clone(),
    };
    let stamp =
        stamp_for(args.timestamp, &format!("dedup:threshold={}:seed={seed}", args.threshold));
    let outcome = dedup::cluster_and_select(samples, &dedup_config, seed, &stamp);
    corpus::write_corpus(&args.out, &outcome.kept)?;
    if let Some(path) = &args.dropped {
        corpus::write_corpus(path, &outcome.dropped)?;
    }
    if let Some(path) = &args.quarantined {
        corpus::write_corpus(path, &outcome.quarantined)?;
    }
    if let Some(path) = &args.report {
        write_json(Some(path), &outcome.report)?;
    }
    print!("{}", outcome.report.to_kv_block());
    Ok(())
}

fn cmd_filter(args: FilterArgs) -> Result<(), AppError> {
    let samples = corpus::read_corpus(&args.input)?;
    let rules = match &args.rules {
        Some(path) => {
            let body = std::fs::read_to_string(path)?;
            let spec: RuleSetSpec =
                toml::from_str(&body).map_err(|e| AppError::Validation(format!("--rules: {e}")))?;
            spec.compile(path.parent())?
        }
        None => RuleSet::default_catalog(),
    };
    let stamp = stamp_for(args.timestamp, &format!("rule_filters:{:?}", args.rules));
    let out = run_filter_stage(samples, &rules, &stamp);
    corpus::write_corpus(&args.out, &out.kept)?;
    if let Some(path) = &args.dropped {
        corpus::write_corpus(path, &out.dropped)?;
    }
    if let Some(path) = &args.flagged {
        corpus::write_corpus(path, &out.flagged)?;
    }
    eprintln!(
        "in={} kept={} dropped={} flagged={}",
        out.stats.input, out.stats.kept, out.stats.dropped, out.stats.flagged
    );
    Ok(())
}

fn cmd_audit(args: AuditArgs, config: &GlobalConfig) -> Result<(), AppError> {
    let seed = require_seed(args.seed, config, "source-audit sampling")?;
    let judge = judge_client(config)?;
    let samples = corpus::read_corpus(&args.input)?;
    let audit_config = SourceAuditConfig {
        enabled: true,
        model_id: args.model.clone(),
        t_keep: args.t_keep,
        t_drop: args.t_drop,
        ..SourceAuditConfig::default()
    };
    let mut by_source: std::collections::BTreeMap<String, Vec<Sample>> = Default::default();
    for sample in samples {
        by_source.entry(sample.source_dataset.clone()).or_default().push(sample);
    }
    let mut audits = Vec::new();
    for (source, members) in &by_source {
        let audit = pipeline::audit_source(
            source,
            members,
            &judge,
            &audit_config,
            derive_seed(seed, &format!("audit:{source}")),
        )?;
        eprintln!(
            "{source}: sampled={} pass_rate={:.3} decision={:?}",
            audit.sampled, audit.pass_rate, audit.decision
        );
        audits.push(audit);
    }
    write_json(args.out.as_deref(), &audits)
}

fn cmd_judge(command: JudgeCommand, config: &GlobalConfig) -> Result<(), AppError> {
    let judge = judge_client(config)?;
    match command {
        JudgeCommand::Relevance(args) => {
            let samples = corpus::read_corpus(&args.input)?;
            let mut lines = Vec::new();
            for sample in samples.iter().filter(|s| s.has_images()) {
                let verdict = judge.score_relevance(sample, &args.model)?;
                lines.push(serde_json::json!({ "id": sample.id, "relevance": verdict }));
            }
            write_jsonl(args.out.as_deref(), &lines)
        }
        JudgeCommand::Quality(args) => {
            let samples = corpus::read_corpus(&args.input)?;
            let mut lines = Vec::new();
            for sample in samples.iter().filter(|s| s.question_type == QuestionType::LongForm) {
                let score = judge.score_quality(sample, &args.model)?;
                lines.push(serde_json::json!({
                    "id": sample.id,
                    "verdict": score.verdict,
                    "rationale": score.rationale,
                }));
            }
            write_jsonl(args.out.as_deref(), &lines)
        }
        JudgeCommand::Vote(args) => {
            let samples = corpus::read_corpus(&args.input)?;
            let mut lines = Vec::new();
            let candidates = samples.iter().filter(|s| {
                matches!(s.question_type, QuestionType::MultipleChoice | QuestionType::ShortForm)
                    && s.reference_answer().map(|a| !a.is_empty()).unwrap_or(false)
            });
            for sample in candidates {
                let outcome = judge.vote_text_dominant(sample, &args.models, args.trials)?;
                lines.push(serde_json::json!({
                    "id": sample.id,
                    "text_dominant": outcome.text_dominant,
                    "votes": outcome.votes,
                }));
            }
            write_jsonl(args.out.as_deref(), &lines)
        }
    }
}

fn cmd_convert(args: ConvertArgs, config: &GlobalConfig) -> Result<(), AppError> {
    let seed = require_seed(args.seed, config, "text-dominant conversion")?;
    if !(0.0..=1.0).contains(&args.fraction) {
        return Err(AppError::Validation(format!(
            "--fraction {} must lie in [0, 1]",
            args.fraction
        )));
    }
    let samples = corpus::read_corpus(&args.input)?;
    let stamp = stamp_for(args.timestamp, &format!("convert:fraction={}", args.fraction));
    let n = samples.len();
    let (converted, kept) = pipeline::convert_text_dominant(samples, args.fraction, seed, &stamp);
    eprintln!("in={n} converted={} kept={}", converted.len(), kept.len());
    let mut merged = converted;
    merged.extend(kept);
    merged.sort_by(|a, b| a.id.cmp(&b.id));
    corpus::write_corpus(&args.out, &merged)?;
    Ok(())
}

fn cmd_improve(command: ImproveCommand, config: &GlobalConfig) -> Result<(), AppError> {
    match command {
        ImproveCommand::Isolate(args) => {
            let templates = match &args.templates {
                Some(path) => IsolationTemplates::load(path)?,
                None => IsolationTemplates::bundled(),
            };
            let samples = corpus::read_corpus(&args.input)?;
            let stamp = stamp_for(args.timestamp, "prompt_isolation");
            let mut out = Vec::with_capacity(samples.len());
            for sample in samples {
                out.push(improve::isolate_prompt(sample, &templates, &stamp)?);
            }
            corpus::write_corpus(&args.out, &out)?;
            eprintln!("{} samples processed", out.len());
            Ok(())
        }
        ImproveCommand::Rewrite(args) => {
            let seed = require_seed(args.seed, config, "rewrite-cohort selection")?;
            let judge = judge_client(config)?;
            let samples = corpus::read_corpus(&args.input)?;
            let cohort = improve::select_rewrite_cohort(&samples, args.fraction, seed)?;
            let stamp = stamp_for(
                args.timestamp,
                &format!("verbose_rewrite:gen={}:ver={}", args.generator, args.verifier),
            );
            let mut out = Vec::with_capacity(samples.len());
            let mut accepted = 0usize;
            for sample in samples {
                let eligible = cohort.contains(&sample.id)
                    && sample.reference_answer().map(|a| !a.trim().is_empty()).unwrap_or(false);
                if eligible {
                    let candidate =
                        improve::rewrite_verbose(&sample, &judge, &args.generator, &args.verifier)?;
                    if candidate.accepted() {
                        let mut rewritten = candidate.into_sample();
                        rewritten.push_lineage(stamp.event(
                            improve::REWRITE_STAGE,
                            VerdictKind::Keep,
                            "rewrite_accepted",
                        ));
                        accepted += 1;
                        out.push(rewritten);
                        continue;
                    }
                }
                out.push(sample);
            }
            out.sort_by(|a, b| a.id.cmp(&b.id));
            corpus::write_corpus(&args.out, &out)?;
            eprintln!("cohort={} accepted={accepted}", cohort.len());
            Ok(())
        }
        ImproveCommand::Cot(args) => {
            let judge = judge_client(config)?;
            let patterns = AnswerPatterns::bundled();
            let task_types: BTreeSet<TaskType> = args
                .task_types
                .iter()
                .map(|s| s.parse::<TaskType>().map_err(AppError::Validation))
                .collect::<Result<_, _>>()?;
            let samples = corpus::read_corpus(&args.input)?;
            let stamp =
                stamp_for(args.timestamp, &format!("cot_generation:gen={}", args.generator));
            let mut out = Vec::with_capacity(samples.len());
            let mut accepted = 0usize;
            for sample in samples {
                if task_types.contains(&sample.task_type) {
                    let verifier = if sample.question_type.is_objective() {
                        None
                    } else {
                        args.verifier.as_deref()
                    };
                    let candidate = improve::generate_cot(
                        &sample,
                        &judge,
                        &args.generator,
                        verifier,
                        &patterns,
                    )?;
                    if candidate.accepted {
                        let mut cot = candidate.into_sample(&args.generator);
                        cot.push_lineage(stamp.event(
                            improve::COT_STAGE,
                            VerdictKind::Keep,
                            "cot_accepted",
                        ));
                        accepted += 1;
                        out.push(cot);
                        continue;
                    }
                }
                out.push(sample);
            }
            out.sort_by(|a, b| a.id.cmp(&b.id));
            corpus::write_corpus(&args.out, &out)?;
            eprintln!("accepted={accepted}");
            Ok(())
        }
    }
}

fn cmd_run(args: RunArgs, config: &GlobalConfig) -> Result<(), AppError> {
    let mut plan = StagePlan::load(&args.plan)?;
    if let Some(seed) = args.seed.or(config.seed) {
        plan.seed = Some(seed);
    }
    if let Some(ts) = args.timestamp {
        plan.timestamp = Some(ts);
    }
    let samples = corpus::read_corpus(&args.input)?;
    // Only build a judge client when an enabled stage scores samples; any
    // other validation problem surfaces from run_anabolism itself.
    let judge = match plan.validate(false) {
        Err(PipelineError::JudgeRequired { .. }) => Some(judge_client(config)?),
        _ => None,
    };
    let outcome = pipeline::run_anabolism(samples, &plan, judge.as_ref())?;
    corpus::write_corpus(&args.out, &outcome.curated)?;
    std::fs::write(&args.ledger, outcome.ledger.to_json_pretty() + "\n")?;
    if let Some(path) = &args.dropped {
        corpus::write_corpus(path, &outcome.dropped)?;
    }
    if let Some(path) = &args.quarantined {
        corpus::write_corpus(path, &outcome.quarantined)?;
    }
    if let Some(path) = &args.review {
        corpus::write_corpus(path, &outcome.review_queue)?;
    }
    if let Some(path) = &args.audits {
        write_json(Some(path), &outcome.audits)?;
    }
    eprintln!(
        "in={} curated={} dropped={} quarantined={} review={}",
        outcome.ledger.input_total,
        outcome.curated.len(),
        outcome.dropped.len(),
        outcome.quarantined.len(),
        outcome.review_queue.len()
    );
    Ok(())
}

fn cmd_plan(command: PlanCommand) -> Result<(), AppError> {
    match command {
        PlanCommand::Incremental(args) => {
            let config = IncrementalConfig {
                k: args.k,
                forced_fraction: args.fraction,
                base_checkpoint: args.base_checkpoint.clone(),
            };
            let plan = catabolism::plan_incremental(args.new, args.old, &config)?;
            match &args.out {
                Some(path) => std::fs::write(path, plan.to_toml())?,
                None => print!("{}", plan.to_toml()),
            }
            eprintln!(
                "f={} old_mixed={} base={}",
                plan.old_fraction, plan.old_mixed, plan.base_checkpoint
            );
            Ok(())
        }
        PlanCommand::Pruning(args) => {
            let plan = catabolism::plan_pruning(&args.targets, args.factor)?;
            let files = plan.write_experiment_files(&args.out_dir)?;
            for file in files {
                println!("{}", file.display());
            }
            Ok(())
        }
    }
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), AppError> {
    let registry = match &args.registry {
        Some(path) => BenchmarkRegistry::load(path)?,
        None => BenchmarkRegistry::bundled(),
    };
    let current = catabolism::load_benchmarks_file(&args.current, &registry)?;
    let previous = catabolism::load_benchmarks_file(&args.previous, &registry)?;
    let inputs = match &args.inputs {
        Some(path) => {
            let body = std::fs::read_to_string(path)?;
            serde_json::from_str::<DiagnosisInputs>(&body)
                .map_err(|e| AppError::Validation(format!("--inputs: {e}")))?
        }
        None => DiagnosisInputs::default(),
    };
    let diagnosis = catabolism::diagnose(&current, &previous, args.tolerance, &registry, &inputs)?;
    write_json(args.out.as_deref(), &diagnosis)
}

fn cmd_report(args: ReportArgs) -> Result<(), AppError> {
    let diagnosis: catabolism::DiagnosisReport =
        serde_json::from_str(&std::fs::read_to_string(&args.diagnosis)?)
            .map_err(|e| AppError::Validation(format!("--diagnosis: {e}")))?;
    let ledger: pipeline::IterationLedger =
        serde_json::from_str(&std::fs::read_to_string(&args.ledger)?)
            .map_err(|e| AppError::Validation(format!("--ledger: {e}")))?;
    let files = catabolism::emit_report(&diagnosis, &ledger, &args.out_dir)?;
    for file in files {
        println!("{}", file.display());
    }
    Ok(())
}
