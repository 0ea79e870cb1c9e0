//! Benchmark-report ingestion, capability-group aggregation, regression
//! diagnosis, and next-iteration planning (incremental-validation mixes and
//! redundant-data pruning experiments).
//!
//! This module consumes evaluation results as CSV; it never runs models.

mod report;

pub use report::emit_report;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::{detect_repetition, parse_patterns, RepetitionConfig};
use crate::pipeline::SourceFilters;

#[derive(Debug, Error)]
pub enum CatabolismError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("row {row}: unknown benchmark `{benchmark}` (not in registry)")]
    UnknownBenchmark { row: usize, benchmark: String },
    #[error("duplicate row for benchmark `{benchmark}`")]
    DuplicateRow { benchmark: String },
    #[error("row {row}: non-numeric value `{value}`")]
    NonNumeric { row: usize, value: String },
    #[error("inconsistent report: {0}")]
    Inconsistent(String),
    #[error("group `{group}` member `{benchmark}` missing from report")]
    MissingMember { group: String, benchmark: String },
    #[error("current iteration {current} must exceed previous iteration {previous}")]
    IterationOrder { current: u64, previous: u64 },
    #[error("sizes must be >= 1 (new {new}, old {old})")]
    SizesRequired { new: u64, old: u64 },
    #[error("old-data fraction {fraction} outside the 5%-20% bound [0.05, 0.20]")]
    FractionOutOfBounds { fraction: f64 },
    #[error("pruning needs a non-empty target source list")]
    EmptyTargets,
    #[error("downsample factor {0} must lie strictly inside (0, 1)")]
    BadFactor(f64),
    #[error("registry: {0}")]
    Registry(String),
}

/// A named set of benchmarks aggregated together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityGroup {
    pub name: String,
    pub members: Vec<String>,
}

impl CapabilityGroup {
    pub fn new(name: impl Into<String>, members: Vec<String>) -> Self {
        CapabilityGroup { name: name.into(), members }
    }
}

/// Known benchmark names and the capability-group layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkRegistry {
    benchmarks: BTreeSet<String>,
    groups: Vec<CapabilityGroup>,
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    benchmarks: Vec<String>,
    #[serde(default, rename = "group")]
    groups: Vec<CapabilityGroup>,
}

impl BenchmarkRegistry {
    pub fn new(
        benchmarks: Vec<String>,
        groups: Vec<CapabilityGroup>,
    ) -> Result<Self, CatabolismError> {
        let benchmarks: BTreeSet<String> = benchmarks.into_iter().collect();
        let mut grouped: BTreeSet<&str> = BTreeSet::new();
        for group in &groups {
            if group.members.is_empty() {
                return Err(CatabolismError::Registry(format!(
                    "group `{}` has no members",
                    group.name
                )));
            }
            for member in &group.members {
                if !benchmarks.contains(member) {
                    return Err(CatabolismError::Registry(format!(
                        "group `{}` member `{member}` is not a registered benchmark",
                        group.name
                    )));
                }
                if !grouped.insert(member) {
                    return Err(CatabolismError::Registry(format!(
                        "benchmark `{member}` appears in more than one group"
                    )));
                }
            }
        }
        Ok(BenchmarkRegistry { benchmarks, groups })
    }

    pub fn bundled() -> Self {
        Self::parse_toml(include_str!("../../assets/benchmark_registry.toml"))
            .expect("bundled registry is valid")
    }

    pub fn parse_toml(body: &str) -> Result<Self, CatabolismError> {
        let file: RegistryFile =
            toml::from_str(body).map_err(|e| CatabolismError::Registry(e.to_string()))?;
        Self::new(file.benchmarks, file.groups)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CatabolismError> {
        Self::parse_toml(&std::fs::read_to_string(path.as_ref())?)
    }

    pub fn contains(&self, benchmark: &str) -> bool {
        self.benchmarks.contains(benchmark)
    }

    pub fn groups(&self) -> &[CapabilityGroup] {
        &self.groups
    }
}

/// One model's benchmark scores at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub model_id: String,
    pub iteration: u64,
    pub scores: BTreeMap<String, f64>,
}

/// Parse a benchmark CSV with header `model_id,iteration,benchmark,value`.
/// Every benchmark name is validated against the registry; duplicate
/// benchmark rows and non-numeric values are errors.
pub fn load_benchmarks(
    reader: impl Read,
    registry: &BenchmarkRegistry,
) -> Result<BenchmarkReport, CatabolismError> {
    let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv_reader
        .headers()
        .map_err(|e| CatabolismError::Csv { row: 1, message: e.to_string() })?
        .clone();
    let expected = ["model_id", "iteration", "benchmark", "value"];
    let actual: Vec<&str> = headers.iter().collect();
    if actual != expected {
        return Err(CatabolismError::Csv {
            row: 1,
            message: format!("header must be {expected:?}, got {actual:?}"),
        });
    }

    let mut model_id: Option<String> = None;
    let mut iteration: Option<u64> = None;
    let mut scores = BTreeMap::new();
    for (idx, record) in csv_reader.records().enumerate() {
        let row = idx + 2; // header is row 1
        let record = record.map_err(|e| CatabolismError::Csv { row, message: e.to_string() })?;
        if record.len() != 4 {
            return Err(CatabolismError::Csv {
                row,
                message: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let (m, it, benchmark, value) = (&record[0], &record[1], &record[2], &record[3]);
        match &model_id {
            None => model_id = Some(m.to_string()),
            Some(existing) if existing != m => {
                return Err(CatabolismError::Inconsistent(format!(
                    "row {row}: model_id `{m}` differs from `{existing}`"
                )))
            }
            _ => {}
        }
        let it: u64 = it
            .parse()
            .map_err(|_| CatabolismError::Csv { row, message: format!("bad iteration `{it}`") })?;
        match iteration {
            None => iteration = Some(it),
            Some(existing) if existing != it => {
                return Err(CatabolismError::Inconsistent(format!(
                    "row {row}: iteration {it} differs from {existing}"
                )))
            }
            _ => {}
        }
        if !registry.contains(benchmark) {
            return Err(CatabolismError::UnknownBenchmark { row, benchmark: benchmark.to_string() });
        }
        let value: f64 = value
            .parse()
            .map_err(|_| CatabolismError::NonNumeric { row, value: value.to_string() })?;
        if !value.is_finite() {
            return Err(CatabolismError::NonNumeric { row, value: value.to_string() });
        }
        if scores.insert(benchmark.to_string(), value).is_some() {
            return Err(CatabolismError::DuplicateRow { benchmark: benchmark.to_string() });
        }
    }
    let model_id =
        model_id.ok_or(CatabolismError::Csv { row: 2, message: "no data rows".into() })?;
    let iteration = iteration.expect("set alongside model_id");
    Ok(BenchmarkReport { model_id, iteration, scores })
}

pub fn load_benchmarks_file(
    path: impl AsRef<Path>,
    registry: &BenchmarkRegistry,
) -> Result<BenchmarkReport, CatabolismError> {
    load_benchmarks(std::fs::File::open(path.as_ref())?, registry)
}

/// Arithmetic mean of the group's member scores, full precision, summed in
/// member order. Display rounding is presentation-only.
pub fn aggregate_group(
    report: &BenchmarkReport,
    group: &CapabilityGroup,
) -> Result<f64, CatabolismError> {
    let mut sum = 0.0;
    for member in &group.members {
        let score = report.scores.get(member).ok_or_else(|| CatabolismError::MissingMember {
            group: group.name.clone(),
            benchmark: member.clone(),
        })?;
        sum += score;
    }
    Ok(sum / group.members.len() as f64)
}

/// Two-decimal display with trailing zeros trimmed: 63.5667 -> "63.57",
/// 44.4 -> "44.4", 81.0 -> "81".
pub fn display_score(value: f64) -> String {
    let mut s = format!("{value:.2}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

/// Diagnosis categories flagged by rule-driven checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosisCategory {
    UnexpectedBehavior,
    KnowledgeGap,
    TaskFormatInconsistency,
    CrossModalGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisFlag {
    pub category: DiagnosisCategory,
    pub evidence: Vec<String>,
}

/// Supplementary evidence feeding the category rules. Everything is optional;
/// absent inputs simply leave their category unflagged.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosisInputs {
    /// Raw model outputs collected from bad cases; scanned with the bundled
    /// refusal/stray catalogs and the repetition detector.
    pub bad_case_outputs: Vec<String>,
    /// Benchmarks treated as knowledge probes; a drop beyond tolerance on any
    /// of them raises the knowledge-gap flag.
    pub knowledge_benchmarks: Vec<String>,
    /// Benchmark pairs that measure the same skill in different formats.
    pub format_pairs: Vec<BenchmarkPair>,
    /// (text-variant, multimodal-variant) pairs for the two-step
    /// decomposition: a large text-over-multimodal lead flags the gap.
    pub modal_pairs: Vec<BenchmarkPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPair {
    pub first: String,
    pub second: String,
    pub max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub benchmark: String,
    pub delta: f64,
}

/// Comparison of one iteration's benchmark report against the previous one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub model_id: String,
    pub iteration: u64,
    pub previous_iteration: u64,
    pub tolerance: f64,
    pub group_means: BTreeMap<String, f64>,
    pub group_deltas: BTreeMap<String, f64>,
    pub deltas: BTreeMap<String, f64>,
    /// Benchmarks that moved beyond tolerance in either direction, sorted by
    /// |delta| descending; negative deltas are the regressions proper.
    pub regressions: Vec<Regression>,
    pub flags: Vec<DiagnosisFlag>,
}

/// Compare two reports and flag rule-driven diagnosis categories.
pub fn diagnose(
    current: &BenchmarkReport,
    previous: &BenchmarkReport,
    tolerance: f64,
    registry: &BenchmarkRegistry,
    inputs: &DiagnosisInputs,
) -> Result<DiagnosisReport, CatabolismError> {
    if current.iteration <= previous.iteration {
        return Err(CatabolismError::IterationOrder {
            current: current.iteration,
            previous: previous.iteration,
        });
    }

    let mut deltas = BTreeMap::new();
    for (benchmark, cur) in &current.scores {
        if let Some(prev) = previous.scores.get(benchmark) {
            deltas.insert(benchmark.clone(), cur - prev);
        }
    }

    let mut group_means = BTreeMap::new();
    let mut group_deltas = BTreeMap::new();
    for group in registry.groups() {
        if let Ok(mean) = aggregate_group(current, group) {
            group_means.insert(group.name.clone(), mean);
            if let Ok(prev_mean) = aggregate_group(previous, group) {
                group_deltas.insert(group.name.clone(), mean - prev_mean);
            }
        }
    }

    let mut regressions: Vec<Regression> = deltas
        .iter()
        .filter(|(_, delta)| delta.abs() > tolerance)
        .map(|(benchmark, delta)| Regression { benchmark: benchmark.clone(), delta: *delta })
        .collect();
    regressions.sort_by(|a, b| {
        b.delta.abs().partial_cmp(&a.delta.abs()).unwrap().then(a.benchmark.cmp(&b.benchmark))
    });

    let mut flags = Vec::new();
    if !inputs.bad_case_outputs.is_empty() {
        let evidence = scan_bad_cases(&inputs.bad_case_outputs);
        if !evidence.is_empty() {
            flags.push(DiagnosisFlag { category: DiagnosisCategory::UnexpectedBehavior, evidence });
        }
    }
    if !inputs.knowledge_benchmarks.is_empty() {
        let mut evidence = Vec::new();
        for benchmark in &inputs.knowledge_benchmarks {
            if let Some(delta) = deltas.get(benchmark) {
                if *delta < -tolerance {
                    evidence.push(format!("{benchmark} fell {delta:.2}"));
                }
            }
        }
        if !evidence.is_empty() {
            flags.push(DiagnosisFlag { category: DiagnosisCategory::KnowledgeGap, evidence });
        }
    }
    let pair_evidence = |pairs: &[BenchmarkPair], directional: bool| -> Vec<String> {
        let mut out = Vec::new();
        for pair in pairs {
            let (Some(a), Some(b)) =
                (current.scores.get(&pair.first), current.scores.get(&pair.second))
            else {
                continue;
            };
            let gap = a - b;
            let triggered = if directional { gap > pair.max_gap } else { gap.abs() > pair.max_gap };
            if triggered {
                out.push(format!(
                    "{} = {} vs {} = {} (gap {:.2}, allowed {:.2})",
                    pair.first,
                    display_score(*a),
                    pair.second,
                    display_score(*b),
                    gap,
                    pair.max_gap
                ));
            }
        }
        out
    };
    let format_evidence = pair_evidence(&inputs.format_pairs, false);
    if !format_evidence.is_empty() {
        flags.push(DiagnosisFlag {
            category: DiagnosisCategory::TaskFormatInconsistency,
            evidence: format_evidence,
        });
    }
    let modal_evidence = pair_evidence(&inputs.modal_pairs, true);
    if !modal_evidence.is_empty() {
        flags.push(DiagnosisFlag {
            category: DiagnosisCategory::CrossModalGap,
            evidence: modal_evidence,
        });
    }

    Ok(DiagnosisReport {
        model_id: current.model_id.clone(),
        iteration: current.iteration,
        previous_iteration: previous.iteration,
        tolerance,
        group_means,
        group_deltas,
        deltas,
        regressions,
        flags,
    })
}

/// Scan raw model outputs with the bundled rule catalogs.
fn scan_bad_cases(outputs: &[String]) -> Vec<String> {
    let refusal = parse_patterns(crate::filters::DEFAULT_REFUSAL_PATTERNS)
        .expect("bundled refusal catalog compiles");
    let stray = parse_patterns(crate::filters::DEFAULT_STRAY_PATTERNS)
        .expect("bundled stray catalog compiles");
    let repetition = RepetitionConfig::default();
    let mut evidence = Vec::new();
    for (i, output) in outputs.iter().enumerate() {
        if refusal.iter().any(|p| p.is_match(output)) {
            evidence.push(format!("output[{i}]: refusal pattern"));
        }
        if stray.iter().any(|p| p.is_match(output)) {
            evidence.push(format!("output[{i}]: stray reference"));
        }
        if let Some(finding) = detect_repetition(output, &repetition) {
            evidence.push(format!("output[{i}]: {:?}-level repetition", finding.level));
        }
    }
    evidence
}

/// Incremental-validation mix: how much old data to blend with the new set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub new_data: u64,
    pub old_data_total: u64,
    pub old_fraction: f64,
    pub old_mixed: u64,
    pub base_checkpoint: String,
}

impl MixPlan {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("plan serialization is infallible")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IncrementalConfig {
    /// Scale between relative new-data size and the old-data fraction.
    pub k: f64,
    /// Explicit fraction override; outside [0.05, 0.20] it is an error.
    pub forced_fraction: Option<f64>,
    /// Checkpoint the incremental run starts from.
    pub base_checkpoint: String,
}

impl Default for IncrementalConfig {
    fn default() -> Self {
        IncrementalConfig { k: 2.0, forced_fraction: None, base_checkpoint: "master".to_string() }
    }
}

pub const MIX_FRACTION_MIN: f64 = 0.05;
pub const MIX_FRACTION_MAX: f64 = 0.20;

/// Plan an incremental-validation run: mix the new data with a clamped
/// fraction `f = clamp(k * new / old, 0.05, 0.20)` of the old training data.
pub fn plan_incremental(
    new_size: u64,
    old_size: u64,
    config: &IncrementalConfig,
) -> Result<MixPlan, CatabolismError> {
    if new_size == 0 || old_size == 0 {
        return Err(CatabolismError::SizesRequired { new: new_size, old: old_size });
    }
    let fraction = match config.forced_fraction {
        Some(f) => {
            if !(MIX_FRACTION_MIN..=MIX_FRACTION_MAX).contains(&f) {
                return Err(CatabolismError::FractionOutOfBounds { fraction: f });
            }
            f
        }
        None => (config.k * new_size as f64 / old_size as f64)
            .clamp(MIX_FRACTION_MIN, MIX_FRACTION_MAX),
    };
    Ok(MixPlan {
        new_data: new_size,
        old_data_total: old_size,
        old_fraction: fraction,
        old_mixed: (fraction * old_size as f64).round() as u64,
        base_checkpoint: config.base_checkpoint.clone(),
    })
}

/// One pruning experiment: a source-filter fragment an anabolism plan runs
/// with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningExperiment {
    pub name: String,
    pub source_filters: SourceFilters,
}

/// The two pruning experiments run after a capability gain: retrain on the
/// new data alone, and retrain with the related existing sources downsampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub target_sources: Vec<String>,
    pub factor: f64,
    pub experiments: [PruningExperiment; 2],
}

pub fn plan_pruning(target_sources: &[String], factor: f64) -> Result<PruningPlan, CatabolismError> {
    if target_sources.is_empty() {
        return Err(CatabolismError::EmptyTargets);
    }
    if !(factor > 0.0 && factor < 1.0) {
        return Err(CatabolismError::BadFactor(factor));
    }
    let mut targets = target_sources.to_vec();
    targets.sort();
    targets.dedup();
    let new_only = PruningExperiment {
        name: "new_only".to_string(),
        source_filters: SourceFilters { exclude: targets.clone(), ..SourceFilters::default() },
    };
    let downsample = PruningExperiment {
        name: "downsample_existing".to_string(),
        source_filters: SourceFilters {
            downsample: targets.iter().map(|t| (t.clone(), factor)).collect(),
            ..SourceFilters::default()
        },
    };
    Ok(PruningPlan { target_sources: targets, factor, experiments: [new_only, downsample] })
}

impl PruningPlan {
    /// Write each experiment as a runnable plan file under `dir`; returns the
    /// written paths.
    pub fn write_experiment_files(
        &self,
        dir: impl AsRef<Path>,
    ) -> Result<Vec<std::path::PathBuf>, CatabolismError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for experiment in &self.experiments {
            let plan = crate::pipeline::StagePlan {
                source_filters: experiment.source_filters.clone(),
                ..crate::pipeline::StagePlan::default()
            };
            let path = dir.join(format!("experiment_{}.toml", experiment.name));
            std::fs::write(&path, plan.to_toml())?;
            written.push(path);
        }
        Ok(written)
    }
}
