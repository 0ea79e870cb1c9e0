//! Orchestration of the six ordered filtering stages plus answer improvement:
//! plan loading, stage execution, per-source auditing, text-dominant
//! conversion, and the iteration ledger.

mod ledger;

pub use ledger::{
    diff_mixture, BucketDiff, BucketMix, IterationLedger, MixtureDiff, MixtureDiffError,
    MixtureManifest, StageStats,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LineageStamp, QuestionType, Sample, TaskType, VerdictKind};
use crate::dedup::{cluster_and_select, normalize_question, DedupConfig};
use crate::filters::{run_filter_stage, FilterConfigError, RuleSet, RuleSetSpec};
use crate::fingerprint::{derive_seed, fingerprint};
use crate::improve::{
    apply_isolation, generate_cot, rewrite_verbose, select_rewrite_cohort, AnswerPatterns,
    ImproveError, IsolationTemplates,
};
use crate::judge::{
    Binary, DecodeParams, JudgeClient, JudgeError, JudgePayload, JudgeRequest, JudgeTask,
    Relevance, Verdict,
};

/// Fixed execution order. The first six mirror the ordered filtering steps;
/// improvement runs last. Disabling a stage skips it without reordering.
pub const STAGE_ORDER: [&str; 7] = [
    "dedup",
    "mismatch_triage",
    "text_dominant",
    "source_audit",
    "rule_filters",
    "quality_filter",
    "improvement",
];

/// Pseudo-stage recorded ahead of the pipeline when source filters apply.
pub const SOURCE_FILTER_STAGE: &str = "source_filter";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(
        "seed required: stages with randomness are enabled ({stages:?}) and seeds are never \
         drawn from the clock; pass an explicit seed"
    )]
    SeedRequired { stages: Vec<String> },
    #[error("judge endpoint required: stages {stages:?} score samples with an external model")]
    JudgeRequired { stages: Vec<String> },
    #[error("plan: {0}")]
    Config(String),
    #[error(transparent)]
    Filter(#[from] FilterConfigError),
    #[error(transparent)]
    Improve(#[from] ImproveError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger conservation violated: {0}")]
    Conservation(String),
}

/// Ingest-time source filtering; this is what pruning experiments configure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceFilters {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_only: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub exclude: Vec<String>,
    /// Per-source keep fraction in (0, 1); applied by seeded draw.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub downsample: BTreeMap<String, f64>,
}

impl SourceFilters {
    pub fn is_empty(&self) -> bool {
        self.include_only.is_none() && self.exclude.is_empty() && self.downsample.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureConfig {
    /// Sources counted in the stage2 bucket; everything else is stage3.
    pub stage2_sources: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupStageConfig {
    pub enabled: bool,
    pub threshold: u32,
    pub prompt_templates: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
}

/// What to do with each non-related relevance verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageAction {
    Keep,
    Drop,
    Convert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageRouting {
    pub unrelated_sci: TriageAction,
    pub unrelated: TriageAction,
    pub conflicting: TriageAction,
}

impl Default for TriageRouting {
    fn default() -> Self {
        TriageRouting {
            unrelated_sci: TriageAction::Convert,
            unrelated: TriageAction::Drop,
            conflicting: TriageAction::Drop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MismatchTriageConfig {
    pub enabled: bool,
    pub model_id: String,
    pub routing: TriageRouting,
    /// Per-source routing overrides, keyed by source_dataset.
    pub source_overrides: BTreeMap<String, TriageRouting>,
}

impl Default for MismatchTriageConfig {
    fn default() -> Self {
        MismatchTriageConfig {
            enabled: false,
            model_id: "relevance-judge".to_string(),
            routing: TriageRouting::default(),
            source_overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextDominantConfig {
    pub enabled: bool,
    /// Exactly three distinct model ids vote from text alone.
    pub models: Vec<String>,
    pub trials: u32,
    /// Fraction of voted text-dominant samples converted to text-only.
    pub convert_fraction: f64,
}

impl Default for TextDominantConfig {
    fn default() -> Self {
        TextDominantConfig { enabled: false, models: Vec::new(), trials: 3, convert_fraction: 0.70 }
    }
}

/// Decision recorded for one audited source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditDecision {
    Keep,
    Downsample { factor: f64 },
    Drop,
    ManualReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceAuditConfig {
    pub enabled: bool,
    pub model_id: String,
    /// pass_rate >= t_keep keeps the source.
    pub t_keep: f64,
    /// pass_rate < t_drop drops it; in between goes to manual review.
    pub t_drop: f64,
    /// Normalized questions repeated strictly more than this many times are
    /// listed as frequent.
    pub frequent_question_threshold: u64,
    /// Reviewed decisions that override the threshold rule per source.
    pub decision_overrides: BTreeMap<String, AuditDecision>,
}

impl Default for SourceAuditConfig {
    fn default() -> Self {
        SourceAuditConfig {
            enabled: false,
            model_id: "audit-judge".to_string(),
            t_keep: 0.8,
            t_drop: 0.5,
            frequent_question_threshold: 50,
            decision_overrides: BTreeMap::new(),
        }
    }
}

/// Audit findings for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceAudit {
    pub source: String,
    pub sampled: u64,
    pub pass_rate: f64,
    pub frequent_questions: Vec<(String, u64)>,
    pub decision: AuditDecision,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleFiltersConfig {
    pub enabled: bool,
    /// TOML rule file; absent means the bundled default catalog.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rules_file: Option<PathBuf>,
    /// Inline rules, appended after the file's.
    #[serde(rename = "rule", skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<crate::filters::RuleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityFilterConfig {
    pub enabled: bool,
    pub model_id: String,
}

impl Default for QualityFilterConfig {
    fn default() -> Self {
        QualityFilterConfig { enabled: false, model_id: "quality-judge".to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImprovementConfig {
    pub enabled: bool,
    pub isolation: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub isolation_templates_file: Option<PathBuf>,
    pub rewrite: bool,
    pub rewrite_fraction: f64,
    pub cot: bool,
    pub cot_task_types: Vec<TaskType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_patterns_file: Option<PathBuf>,
    pub generator_model: String,
    pub verifier_model: String,
}

impl Default for ImprovementConfig {
    fn default() -> Self {
        ImprovementConfig {
            enabled: false,
            isolation: true,
            isolation_templates_file: None,
            rewrite: true,
            rewrite_fraction: 0.10,
            cot: true,
            cot_task_types: vec![TaskType::Math, TaskType::Knowledge, TaskType::Chart],
            answer_patterns_file: None,
            generator_model: "generator-72b".to_string(),
            verifier_model: "verifier-76b".to_string(),
        }
    }
}

/// Full description of one anabolism run, loadable from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub iteration: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Pinned run timestamp (RFC 3339). Replays are byte-identical only when
    /// this is set; otherwise the wall clock is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
    pub source_filters: SourceFilters,
    pub mixture: MixtureConfig,
    pub dedup: DedupStageConfig,
    pub mismatch_triage: MismatchTriageConfig,
    pub text_dominant: TextDominantConfig,
    pub source_audit: SourceAuditConfig,
    pub rule_filters: RuleFiltersConfig,
    pub quality_filter: QualityFilterConfig,
    pub improvement: ImprovementConfig,
}

impl StagePlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let body = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&body).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("plan serialization is infallible")
    }

    /// Fingerprint of the whole plan; stamped into the ledger.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_toml())
    }

    /// Stages with randomness that are enabled.
    fn randomized_stages(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.dedup.enabled {
            out.push("dedup".to_string());
        }
        if self.text_dominant.enabled {
            out.push("text_dominant".to_string());
        }
        if self.source_audit.enabled {
            out.push("source_audit".to_string());
        }
        if self.improvement.enabled && (self.improvement.rewrite || self.improvement.cot) {
            out.push("improvement".to_string());
        }
        if !self.source_filters.downsample.is_empty() {
            out.push(SOURCE_FILTER_STAGE.to_string());
        }
        out
    }

    fn judge_stages(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.mismatch_triage.enabled {
            out.push("mismatch_triage".to_string());
        }
        if self.text_dominant.enabled {
            out.push("text_dominant".to_string());
        }
        if self.source_audit.enabled {
            out.push("source_audit".to_string());
        }
        if self.quality_filter.enabled {
            out.push("quality_filter".to_string());
        }
        if self.improvement.enabled && (self.improvement.rewrite || self.improvement.cot) {
            out.push("improvement".to_string());
        }
        out
    }

    pub fn validate(&self, have_judge: bool) -> Result<(), PipelineError> {
        let randomized = self.randomized_stages();
        if !randomized.is_empty() && self.seed.is_none() {
            return Err(PipelineError::SeedRequired { stages: randomized });
        }
        let judged = self.judge_stages();
        if !judged.is_empty() && !have_judge {
            return Err(PipelineError::JudgeRequired { stages: judged });
        }
        if self.text_dominant.enabled {
            let models = &self.text_dominant.models;
            if models.len() != 3 || models.iter().collect::<BTreeSet<_>>().len() != 3 {
                return Err(PipelineError::Config(
                    "text_dominant needs exactly 3 distinct model ids".into(),
                ));
            }
            if self.text_dominant.trials == 0 {
                return Err(PipelineError::Config("text_dominant trials must be >= 1".into()));
            }
            let p = self.text_dominant.convert_fraction;
            if !(0.0..=1.0).contains(&p) {
                return Err(PipelineError::Config(format!(
                    "convert_fraction {p} must lie in [0, 1]"
                )));
            }
        }
        if self.source_audit.enabled {
            let (tk, td) = (self.source_audit.t_keep, self.source_audit.t_drop);
            if !(0.0..=1.0).contains(&tk) || !(0.0..=1.0).contains(&td) || td > tk {
                return Err(PipelineError::Config(format!(
                    "audit thresholds need 0 <= t_drop ({td}) <= t_keep ({tk}) <= 1"
                )));
            }
        }
        if self.improvement.enabled && self.improvement.rewrite {
            let f = self.improvement.rewrite_fraction;
            if !(f > 0.0 && f <= 1.0) {
                return Err(PipelineError::Config(format!(
                    "rewrite_fraction {f} must lie in (0, 1]"
                )));
            }
        }
        for (source, factor) in &self.source_filters.downsample {
            if !(*factor > 0.0 && *factor < 1.0) {
                return Err(PipelineError::Config(format!(
                    "downsample factor {factor} for {source} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Everything a finished anabolism run produces.
#[derive(Debug)]
pub struct AnabolismOutcome {
    pub curated: Vec<Sample>,
    pub dropped: Vec<Sample>,
    pub quarantined: Vec<Sample>,
    /// Flagged samples awaiting human review; they also remain in `curated`.
    pub review_queue: Vec<Sample>,
    pub audits: Vec<SourceAudit>,
    pub ledger: IterationLedger,
}

struct StageContext<'a> {
    plan: &'a StagePlan,
    judge: Option<&'a JudgeClient>,
    seed: u64,
    timestamp: DateTime<Utc>,
}

impl StageContext<'_> {
    fn stamp<C: Serialize>(&self, config: &C) -> LineageStamp {
        let canonical = toml::to_string(config)
            .unwrap_or_else(|_| serde_json::to_string(config).expect("config serializes"));
        LineageStamp::new(self.timestamp, fingerprint(&canonical))
    }

    fn judge(&self) -> &JudgeClient {
        self.judge.expect("validated: judge stages require a client")
    }
}

/// Run the anabolism phase over a corpus. Stages execute in fixed order;
/// disabled stages pass samples through untouched (and unstamped). The
/// returned ledger always satisfies conservation, which is re-verified before
/// returning.
pub fn run_anabolism(
    samples: Vec<Sample>,
    plan: &StagePlan,
    judge: Option<&JudgeClient>,
) -> Result<AnabolismOutcome, PipelineError> {
    plan.validate(judge.is_some())?;
    // Compile every config up front: a bad stage config aborts before any
    // sample is touched.
    let rules = load_rules(&plan.rule_filters)?;
    let isolation_templates = match &plan.improvement.isolation_templates_file {
        Some(path) => IsolationTemplates::load(path)?,
        None => IsolationTemplates::bundled(),
    };
    let answer_patterns = match &plan.improvement.answer_patterns_file {
        Some(path) => AnswerPatterns::load(path)?,
        None => AnswerPatterns::bundled(),
    };

    let ctx = StageContext {
        plan,
        judge,
        seed: plan.seed.unwrap_or(0),
        timestamp: plan.timestamp.unwrap_or_else(Utc::now),
    };

    let input_total = samples.len() as u64;
    let mut stage_stats = Vec::with_capacity(STAGE_ORDER.len() + 1);
    let mut dropped_all = Vec::new();
    let mut quarantined_all = Vec::new();
    let mut review_queue = Vec::new();
    let mut audits = Vec::new();

    // Ingest-time source filters (pruning experiments plug in here).
    let mut current = {
        let mut stats = if ctx.plan.source_filters.is_empty() {
            StageStats::disabled(SOURCE_FILTER_STAGE, input_total)
        } else {
            StageStats::new(SOURCE_FILTER_STAGE, input_total)
        };
        let (kept, dropped) = apply_source_filters(samples, &ctx);
        if ctx.plan.source_filters.is_empty() {
            debug_assert!(dropped.is_empty());
        } else {
            stats.kept = kept.len() as u64;
            stats.dropped = dropped.len() as u64;
        }
        dropped_all.extend(dropped);
        stage_stats.push(stats);
        kept
    };

    for stage in STAGE_ORDER {
        let input = current.len() as u64;
        let outcome = match stage {
            "dedup" if plan.dedup.enabled => stage_dedup(current, &ctx),
            "mismatch_triage" if plan.mismatch_triage.enabled => stage_triage(current, &ctx)?,
            "text_dominant" if plan.text_dominant.enabled => stage_text_dominant(current, &ctx)?,
            "source_audit" if plan.source_audit.enabled => {
                let (outcome, stage_audits) = stage_source_audit(current, &ctx)?;
                audits = stage_audits;
                outcome
            }
            "rule_filters" if plan.rule_filters.enabled => {
                let out = run_filter_stage(current, &rules, &ctx.stamp(&plan.rule_filters));
                let mut surviving = out.kept;
                review_queue.extend(out.flagged.iter().cloned());
                surviving.extend(out.flagged);
                StageOutcome {
                    surviving,
                    dropped: out.dropped,
                    quarantined: Vec::new(),
                    stats: out.stats,
                }
            }
            "quality_filter" if plan.quality_filter.enabled => stage_quality(current, &ctx)?,
            "improvement" if plan.improvement.enabled => {
                stage_improvement(current, &ctx, &isolation_templates, &answer_patterns)?
            }
            _ => {
                let stats = StageStats::disabled(stage, input);
                StageOutcome { surviving: current, dropped: Vec::new(), quarantined: Vec::new(), stats }
            }
        };
        current = outcome.surviving;
        current.sort_by(|a, b| a.id.cmp(&b.id));
        dropped_all.extend(outcome.dropped);
        quarantined_all.extend(outcome.quarantined);
        stage_stats.push(outcome.stats);
    }

    let stage2: BTreeSet<String> = plan.mixture.stage2_sources.iter().cloned().collect();
    let ledger = IterationLedger {
        iteration: plan.iteration,
        seed: ctx.seed,
        config_fingerprint: plan.fingerprint(),
        input_total,
        stage_stats,
        mixture: MixtureManifest::from_samples(&current, &stage2),
    };
    ledger.verify_conservation().map_err(PipelineError::Conservation)?;

    dropped_all.sort_by(|a, b| a.id.cmp(&b.id));
    quarantined_all.sort_by(|a, b| a.id.cmp(&b.id));
    review_queue.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(AnabolismOutcome {
        curated: current,
        dropped: dropped_all,
        quarantined: quarantined_all,
        review_queue,
        audits,
        ledger,
    })
}

struct StageOutcome {
    surviving: Vec<Sample>,
    dropped: Vec<Sample>,
    quarantined: Vec<Sample>,
    stats: StageStats,
}

fn load_rules(cfg: &RuleFiltersConfig) -> Result<RuleSet, PipelineError> {
    if cfg.rules_file.is_none() && cfg.rules.is_empty() {
        return Ok(RuleSet::default_catalog());
    }
    let mut spec = RuleSetSpec::default();
    let mut base_dir = None;
    if let Some(path) = &cfg.rules_file {
        let body = std::fs::read_to_string(path)?;
        let file_spec: RuleSetSpec =
            toml::from_str(&body).map_err(|e| PipelineError::Config(e.to_string()))?;
        spec.rules.extend(file_spec.rules);
        base_dir = path.parent().map(Path::to_path_buf);
    }
    spec.rules.extend(cfg.rules.iter().cloned());
    Ok(spec.compile(base_dir.as_deref())?)
}

fn apply_source_filters(samples: Vec<Sample>, ctx: &StageContext) -> (Vec<Sample>, Vec<Sample>) {
    let filters = &ctx.plan.source_filters;
    if filters.is_empty() {
        return (samples, Vec::new());
    }
    let mut kept = Vec::with_capacity(samples.len());
    let mut dropped = Vec::new();
    let include: Option<BTreeSet<&String>> =
        filters.include_only.as_ref().map(|v| v.iter().collect());
    let exclude: BTreeSet<&String> = filters.exclude.iter().collect();
    let stamp = ctx.stamp(filters);

    let mut by_source: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for sample in samples {
        by_source.entry(sample.source_dataset.clone()).or_default().push(sample);
    }
    for (source, mut members) in by_source {
        let excluded = exclude.contains(&source)
            || include.as_ref().map(|inc| !inc.contains(&source)).unwrap_or(false);
        if excluded {
            for mut s in members {
                s.push_lineage(stamp.event(SOURCE_FILTER_STAGE, VerdictKind::Drop, "source_excluded"));
                dropped.push(s);
            }
            continue;
        }
        if let Some(factor) = filters.downsample.get(&source) {
            members.sort_by(|a, b| a.id.cmp(&b.id));
            let keep_n = (factor * members.len() as f64 + 0.5).floor() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                ctx.seed,
                &format!("source_filter:{source}"),
            ));
            members.shuffle(&mut rng);
            for (i, mut s) in members.into_iter().enumerate() {
                if i < keep_n {
                    kept.push(s);
                } else {
                    s.push_lineage(stamp.event(
                        SOURCE_FILTER_STAGE,
                        VerdictKind::Drop,
                        format!("source_downsampled:{factor}"),
                    ));
                    dropped.push(s);
                }
            }
        } else {
            kept.append(&mut members);
        }
    }
    (kept, dropped)
}

fn stage_dedup(current: Vec<Sample>, ctx: &StageContext) -> StageOutcome {
    let plan_cfg = &ctx.plan.dedup;
    let cfg = DedupConfig {
        threshold: plan_cfg.threshold,
        prompt_templates: plan_cfg.prompt_templates.clone(),
        image_root: plan_cfg.image_root.clone(),
    };
    let stamp = ctx.stamp(plan_cfg);
    let input = current.len() as u64;
    let out = cluster_and_select(current, &cfg, derive_seed(ctx.seed, "dedup"), &stamp);
    let stats = StageStats {
        kept: out.report.kept,
        dropped: out.report.removed,
        quarantined: out.report.quarantined,
        ..StageStats::new("dedup", input)
    };
    StageOutcome { surviving: out.kept, dropped: out.dropped, quarantined: out.quarantined, stats }
}

fn stage_triage(current: Vec<Sample>, ctx: &StageContext) -> Result<StageOutcome, PipelineError> {
    let cfg = &ctx.plan.mismatch_triage;
    let stamp = ctx.stamp(cfg);
    let judge = ctx.judge();
    let mut stats = StageStats::new("mismatch_triage", current.len() as u64);

    let verdicts: Vec<Option<Result<Relevance, JudgeError>>> = current
        .par_iter()
        .map(|sample| {
            let candidate =
                sample.has_images() && sample.question_type == QuestionType::LongForm;
            candidate.then(|| judge.score_relevance(sample, &cfg.model_id))
        })
        .collect();

    let mut surviving = Vec::new();
    let mut dropped = Vec::new();
    for (mut sample, verdict) in current.into_iter().zip(verdicts) {
        let Some(verdict) = verdict else {
            sample.push_lineage(stamp.event("mismatch_triage", VerdictKind::Keep, "not_candidate"));
            stats.kept += 1;
            surviving.push(sample);
            continue;
        };
        let relevance = verdict?;
        let routing = cfg.source_overrides.get(&sample.source_dataset).unwrap_or(&cfg.routing);
        let (action, code) = match relevance {
            Relevance::Related => (TriageAction::Keep, "related"),
            Relevance::UnrelatedSci => (routing.unrelated_sci, "unrelated_sci"),
            Relevance::Unrelated => (routing.unrelated, "unrelated"),
            Relevance::Conflicting => (routing.conflicting, "conflicting"),
        };
        match action {
            TriageAction::Keep => {
                sample.push_lineage(stamp.event("mismatch_triage", VerdictKind::Keep, code));
                stats.kept += 1;
                surviving.push(sample);
            }
            TriageAction::Drop => {
                sample.push_lineage(stamp.event("mismatch_triage", VerdictKind::Drop, code));
                stats.dropped += 1;
                dropped.push(sample);
            }
            TriageAction::Convert => {
                sample.convert_to_text_only();
                sample
                    .push_lineage(stamp.event("mismatch_triage", VerdictKind::ConvertTextOnly, code));
                stats.converted += 1;
                surviving.push(sample);
            }
        }
    }
    Ok(StageOutcome { surviving, dropped, quarantined: Vec::new(), stats })
}

/// Convert an exact seeded share of voted text-dominant samples to text-only:
/// `round_half_up(p * n)` samples lose their images; the rest keep them.
pub fn convert_text_dominant(
    mut samples: Vec<Sample>,
    p: f64,
    seed: u64,
    stamp: &LineageStamp,
) -> (Vec<Sample>, Vec<Sample>) {
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let n = samples.len();
    let convert_n = (p * n as f64 + 0.5).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let mut converted = Vec::with_capacity(convert_n);
    let mut kept = Vec::with_capacity(n - convert_n);
    for (i, mut sample) in samples.into_iter().enumerate() {
        if i < convert_n {
            sample.convert_to_text_only();
            sample.push_lineage(stamp.event(
                "text_dominant",
                VerdictKind::ConvertTextOnly,
                "text_dominant",
            ));
            converted.push(sample);
        } else {
            sample.push_lineage(stamp.event("text_dominant", VerdictKind::Keep, "image_kept"));
            kept.push(sample);
        }
    }
    converted.sort_by(|a, b| a.id.cmp(&b.id));
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    (converted, kept)
}

fn stage_text_dominant(
    current: Vec<Sample>,
    ctx: &StageContext,
) -> Result<StageOutcome, PipelineError> {
    let cfg = &ctx.plan.text_dominant;
    let stamp = ctx.stamp(cfg);
    let judge = ctx.judge();
    let mut stats = StageStats::new("text_dominant", current.len() as u64);

    let votes: Vec<Option<Result<bool, JudgeError>>> = current
        .par_iter()
        .map(|sample| {
            let candidate = sample.has_images()
                && matches!(
                    sample.question_type,
                    QuestionType::MultipleChoice | QuestionType::ShortForm
                )
                && sample.reference_answer().map(|a| !a.trim().is_empty()).unwrap_or(false);
            candidate.then(|| {
                judge
                    .vote_text_dominant(sample, &cfg.models, cfg.trials)
                    .map(|outcome| outcome.text_dominant)
            })
        })
        .collect();

    let mut voted_dominant = Vec::new();
    let mut surviving = Vec::new();
    for (mut sample, vote) in current.into_iter().zip(votes) {
        match vote {
            None => {
                sample.push_lineage(stamp.event("text_dominant", VerdictKind::Keep, "not_candidate"));
                stats.kept += 1;
                surviving.push(sample);
            }
            Some(vote) => {
                if vote? {
                    voted_dominant.push(sample);
                } else {
                    sample.push_lineage(stamp.event(
                        "text_dominant",
                        VerdictKind::Keep,
                        "vote_negative",
                    ));
                    stats.kept += 1;
                    surviving.push(sample);
                }
            }
        }
    }

    let (converted, kept_with_images) = convert_text_dominant(
        voted_dominant,
        cfg.convert_fraction,
        derive_seed(ctx.seed, "text_dominant"),
        &stamp,
    );
    stats.converted += converted.len() as u64;
    stats.kept += kept_with_images.len() as u64;
    surviving.extend(converted);
    surviving.extend(kept_with_images);
    Ok(StageOutcome { surviving, dropped: Vec::new(), quarantined: Vec::new(), stats })
}

/// Audit one source: judge a seeded sample of its records with a binary
/// quality metric, list frequently repeated questions over the whole source,
/// and decide the source's fate from the thresholds (or a reviewed override).
pub fn audit_source(
    source: &str,
    samples: &[Sample],
    judge: &JudgeClient,
    cfg: &SourceAuditConfig,
    seed: u64,
) -> Result<SourceAudit, PipelineError> {
    let n = samples.len();
    // Sampling rule: tiny sources (n <= 10) are audited in full; otherwise
    // a tenth of the source, capped at 1000.
    let target = if n <= 10 { n } else { (n / 10).min(1000) };
    let mut indices: Vec<usize> = (0..n).collect();
    indices.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(target);

    let scores: Vec<Result<Binary, JudgeError>> = indices
        .par_iter()
        .map(|&i| {
            let sample = &samples[i];
            let request = JudgeRequest {
                task: JudgeTask::QualityBinary,
                model_id: cfg.model_id.clone(),
                payload: JudgePayload {
                    question: sample.question_text(),
                    answer: sample.reference_answer().map(str::to_string),
                    image_uris: sample.images.iter().map(|i| i.uri.clone()).collect(),
                    ..JudgePayload::default()
                },
                decode_params: DecodeParams::default(),
            };
            judge.send(&request).and_then(|resp| match resp.verdict {
                Verdict::Binary(b) => Ok(b),
                other => {
                    Err(JudgeError::Protocol(format!("expected binary verdict, got {other:?}")))
                }
            })
        })
        .collect();

    let mut passes = 0u64;
    let mut scored = 0u64;
    for score in scores {
        match score {
            Ok(Binary::Pass) => {
                passes += 1;
                scored += 1;
            }
            Ok(Binary::Fail) => scored += 1,
            Err(e) => {
                // Judge failures shrink the audited sample instead of
                // failing the whole audit.
                eprintln!("warning: audit of source {source}: judge error: {e}");
            }
        }
    }
    let pass_rate = if scored == 0 { 0.0 } else { passes as f64 / scored as f64 };

    let mut question_counts: BTreeMap<String, u64> = BTreeMap::new();
    for sample in samples {
        *question_counts.entry(normalize_question(&sample.question_text(), &[])).or_default() += 1;
    }
    let mut frequent_questions: Vec<(String, u64)> = question_counts
        .into_iter()
        .filter(|(_, count)| *count > cfg.frequent_question_threshold)
        .collect();
    frequent_questions.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let decision = if let Some(forced) = cfg.decision_overrides.get(source) {
        forced.clone()
    } else if scored == 0 {
        AuditDecision::ManualReview
    } else if pass_rate >= cfg.t_keep {
        AuditDecision::Keep
    } else if pass_rate < cfg.t_drop {
        AuditDecision::Drop
    } else {
        AuditDecision::ManualReview
    };

    Ok(SourceAudit {
        source: source.to_string(),
        sampled: scored,
        pass_rate,
        frequent_questions,
        decision,
    })
}

fn stage_source_audit(
    current: Vec<Sample>,
    ctx: &StageContext,
) -> Result<(StageOutcome, Vec<SourceAudit>), PipelineError> {
    let cfg = &ctx.plan.source_audit;
    let stamp = ctx.stamp(cfg);
    let judge = ctx.judge();
    let mut stats = StageStats::new("source_audit", current.len() as u64);

    let mut by_source: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for sample in current {
        by_source.entry(sample.source_dataset.clone()).or_default().push(sample);
    }

    let mut surviving = Vec::new();
    let mut dropped = Vec::new();
    let mut audits = Vec::new();
    for (source, mut members) in by_source {
        let audit = audit_source(
            &source,
            &members,
            judge,
            cfg,
            derive_seed(ctx.seed, &format!("audit:{source}")),
        )?;
        match &audit.decision {
            AuditDecision::Keep => {
                for mut s in members {
                    s.push_lineage(stamp.event("source_audit", VerdictKind::Keep, "audit_keep"));
                    stats.kept += 1;
                    surviving.push(s);
                }
            }
            AuditDecision::Drop => {
                let reason = format!("audit_drop:pass_rate={:.3}", audit.pass_rate);
                for mut s in members {
                    s.push_lineage(stamp.event("source_audit", VerdictKind::Drop, reason.clone()));
                    stats.dropped += 1;
                    dropped.push(s);
                }
            }
            AuditDecision::ManualReview => {
                for mut s in members {
                    s.push_lineage(stamp.event(
                        "source_audit",
                        VerdictKind::Flag,
                        "audit_manual_review",
                    ));
                    stats.kept += 1;
                    stats.flagged += 1;
                    surviving.push(s);
                }
            }
            AuditDecision::Downsample { factor } => {
                members.sort_by(|a, b| a.id.cmp(&b.id));
                let keep_n = (factor * members.len() as f64 + 0.5).floor() as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    ctx.seed,
                    &format!("audit_downsample:{source}"),
                ));
                members.shuffle(&mut rng);
                for (i, mut s) in members.into_iter().enumerate() {
                    if i < keep_n {
                        s.push_lineage(stamp.event(
                            "source_audit",
                            VerdictKind::Keep,
                            format!("audit_downsample_kept:{factor}"),
                        ));
                        stats.kept += 1;
                        surviving.push(s);
                    } else {
                        s.push_lineage(stamp.event(
                            "source_audit",
                            VerdictKind::Drop,
                            format!("audit_downsample:{factor}"),
                        ));
                        stats.dropped += 1;
                        dropped.push(s);
                    }
                }
            }
        }
        audits.push(audit);
    }
    Ok((StageOutcome { surviving, dropped, quarantined: Vec::new(), stats }, audits))
}

fn stage_quality(current: Vec<Sample>, ctx: &StageContext) -> Result<StageOutcome, PipelineError> {
    let cfg = &ctx.plan.quality_filter;
    let stamp = ctx.stamp(cfg);
    let judge = ctx.judge();
    let mut stats = StageStats::new("quality_filter", current.len() as u64);

    let scores: Vec<Option<Result<Binary, JudgeError>>> = current
        .par_iter()
        .map(|sample| {
            (sample.question_type == QuestionType::LongForm)
                .then(|| judge.score_quality(sample, &cfg.model_id).map(|score| score.verdict))
        })
        .collect();

    let mut surviving = Vec::new();
    let mut dropped = Vec::new();
    for (mut sample, score) in current.into_iter().zip(scores) {
        match score {
            None => {
                sample.push_lineage(stamp.event("quality_filter", VerdictKind::Keep, "not_candidate"));
                stats.kept += 1;
                surviving.push(sample);
            }
            Some(score) => match score? {
                Binary::Pass => {
                    sample
                        .push_lineage(stamp.event("quality_filter", VerdictKind::Keep, "quality_pass"));
                    stats.kept += 1;
                    surviving.push(sample);
                }
                Binary::Fail => {
                    sample
                        .push_lineage(stamp.event("quality_filter", VerdictKind::Drop, "quality_fail"));
                    stats.dropped += 1;
                    dropped.push(sample);
                }
            },
        }
    }
    Ok(StageOutcome { surviving, dropped, quarantined: Vec::new(), stats })
}

fn stage_improvement(
    mut current: Vec<Sample>,
    ctx: &StageContext,
    templates: &IsolationTemplates,
    patterns: &AnswerPatterns,
) -> Result<StageOutcome, PipelineError> {
    let cfg = &ctx.plan.improvement;
    let stamp = ctx.stamp(cfg);
    let judge_needed = cfg.rewrite || cfg.cot;
    let mut stats = StageStats::new("improvement", current.len() as u64);
    let mut codes: BTreeMap<String, Vec<&'static str>> = BTreeMap::new();

    if cfg.isolation {
        for sample in &mut current {
            if apply_isolation(sample, templates)? {
                codes.entry(sample.id.clone()).or_default().push("isolated");
            }
        }
    }

    let cohort = if cfg.rewrite {
        select_rewrite_cohort(&current, cfg.rewrite_fraction, derive_seed(ctx.seed, "rewrite"))?
    } else {
        BTreeSet::new()
    };

    let cot_types: BTreeSet<TaskType> = cfg.cot_task_types.iter().copied().collect();
    let mut out = Vec::with_capacity(current.len());
    for sample in current {
        let id = sample.id.clone();
        let mut sample = sample;
        let mut rewritten = false;

        if judge_needed && cohort.contains(&id) {
            if sample.reference_answer().map(|a| !a.trim().is_empty()).unwrap_or(false) {
                let candidate = rewrite_verbose(
                    &sample,
                    ctx.judge(),
                    &cfg.generator_model,
                    &cfg.verifier_model,
                )?;
                if candidate.accepted() {
                    sample = candidate.into_sample();
                    codes.entry(id.clone()).or_default().push("rewrite_accepted");
                    rewritten = true;
                } else {
                    codes.entry(id.clone()).or_default().push("rewrite_rejected");
                }
            } else {
                codes.entry(id.clone()).or_default().push("rewrite_skipped_no_reference");
            }
        }

        if judge_needed && cfg.cot && !rewritten && cot_types.contains(&sample.task_type) {
            let verifier = (!sample.question_type.is_objective())
                .then_some(cfg.verifier_model.as_str());
            let candidate =
                generate_cot(&sample, ctx.judge(), &cfg.generator_model, verifier, patterns)?;
            if candidate.accepted {
                sample = candidate.into_sample(&cfg.generator_model);
                codes.entry(id.clone()).or_default().push("cot_accepted");
                rewritten = true;
            } else {
                codes.entry(id.clone()).or_default().push("cot_rejected");
            }
        }

        let reason = codes.remove(&id).map(|c| c.join(",")).unwrap_or_else(|| "unchanged".into());
        sample.push_lineage(stamp.event("improvement", VerdictKind::Keep, reason));
        if rewritten {
            stats.rewritten += 1;
        } else {
            stats.kept += 1;
        }
        out.push(sample);
    }
    Ok(StageOutcome { surviving: out, dropped: Vec::new(), quarantined: Vec::new(), stats })
}
