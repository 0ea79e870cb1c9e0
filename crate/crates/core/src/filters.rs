//! Rule-based response filtering: multi-granularity repetition detection and
//! the catalog of low-quality-response rules (refusals, stray references,
//! length caps, duplicate QA pairs, prompt mismatches).
//!
//! Rule catalogs ship as pattern files (one regular expression per line, `#`
//! comments) so widening a rule after reviewing new bad cases is a config
//! edit, not a code change.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LineageStamp, Role, Sample, TaskType, VerdictKind};
use crate::pipeline::StageStats;

pub const STAGE_NAME: &str = "rule_filters";

/// Default refusal catalog bundled with the crate.
pub const DEFAULT_REFUSAL_PATTERNS: &str = include_str!("../assets/refusal_patterns.txt");
/// Default stray-reference catalog bundled with the crate.
pub const DEFAULT_STRAY_PATTERNS: &str = include_str!("../assets/stray_reference_patterns.txt");

#[derive(Debug, Error)]
pub enum FilterConfigError {
    #[error("rule `{rule}`: bad pattern: {source}")]
    BadPattern {
        rule: String,
        #[source]
        source: regex::Error,
    },
    #[error("duplicate rule name `{0}`")]
    DuplicateRuleName(String),
    #[error("rule `{rule}`: {message}")]
    Invalid { rule: String, message: String },
    #[error("pattern file {path}: {source}")]
    PatternFile {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("repetition config: {0}")]
    Repetition(String),
}

/// Thresholds for repetition detection at each granularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepetitionConfig {
    /// Minimum run of consecutive identical tokens.
    pub token_run_min: usize,
    /// Inclusive n-gram lengths scanned for phrase runs.
    pub phrase_len_range: (usize, usize),
    /// Minimum consecutive repeats of an n-gram.
    pub phrase_run_min: usize,
    /// Minimum consecutive identical sentences.
    pub sentence_repeat_min: usize,
    /// Minimum consecutive identical paragraphs.
    pub paragraph_repeat_min: usize,
    /// Task types never filtered for repetition (OCR and tabular answers
    /// legitimately repeat).
    pub exempt_task_types: BTreeSet<TaskType>,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        RepetitionConfig {
            token_run_min: 10,
            phrase_len_range: (2, 8),
            phrase_run_min: 5,
            sentence_repeat_min: 3,
            paragraph_repeat_min: 2,
            exempt_task_types: BTreeSet::from([TaskType::OcrQa, TaskType::DocKie]),
        }
    }
}

impl RepetitionConfig {
    pub fn validate(&self) -> Result<(), FilterConfigError> {
        for (name, v) in [
            ("token_run_min", self.token_run_min),
            ("phrase_run_min", self.phrase_run_min),
            ("sentence_repeat_min", self.sentence_repeat_min),
            ("paragraph_repeat_min", self.paragraph_repeat_min),
        ] {
            if v < 2 {
                return Err(FilterConfigError::Repetition(format!("{name} must be >= 2, got {v}")));
            }
        }
        let (lo, hi) = self.phrase_len_range;
        if lo < 2 || lo > hi {
            return Err(FilterConfigError::Repetition(format!(
                "phrase_len_range [{lo}, {hi}] must satisfy 2 <= lo <= hi"
            )));
        }
        Ok(())
    }
}

/// Granularity at which repeated content was found, most specific first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepetitionLevel {
    Token,
    Phrase,
    Sentence,
    Paragraph,
}

/// A detected repetition: its level and byte span in the original text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub level: RepetitionLevel,
    pub span: (usize, usize),
}

/// Detect repeated content at token, phrase, sentence, and paragraph level.
/// Returns the lowest-index finding at the most specific level that fires.
pub fn detect_repetition(text: &str, cfg: &RepetitionConfig) -> Option<Finding> {
    let tokens = tokenize(text);
    if let Some(span) = token_run(text, &tokens, cfg.token_run_min) {
        return Some(Finding { level: RepetitionLevel::Token, span });
    }
    if let Some(span) = phrase_run(text, &tokens, cfg.phrase_len_range, cfg.phrase_run_min) {
        return Some(Finding { level: RepetitionLevel::Phrase, span });
    }
    if let Some(span) = unit_run(&split_sentences(text), cfg.sentence_repeat_min) {
        return Some(Finding { level: RepetitionLevel::Sentence, span });
    }
    if let Some(span) = unit_run(&split_paragraphs(text), cfg.paragraph_repeat_min) {
        return Some(Finding { level: RepetitionLevel::Paragraph, span });
    }
    None
}

/// Unicode-whitespace tokenization with byte spans.
fn tokenize(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

fn token_at<'t>(text: &'t str, span: (usize, usize)) -> &'t str {
    &text[span.0..span.1]
}

fn token_run(text: &str, tokens: &[(usize, usize)], min_run: usize) -> Option<(usize, usize)> {
    let mut i = 0;
    while i < tokens.len() {
        let mut j = i + 1;
        while j < tokens.len() && token_at(text, tokens[j]) == token_at(text, tokens[i]) {
            j += 1;
        }
        if j - i >= min_run {
            return Some((tokens[i].0, tokens[j - 1].1));
        }
        i = j;
    }
    None
}

fn phrase_run(
    text: &str,
    tokens: &[(usize, usize)],
    (lo, hi): (usize, usize),
    min_run: usize,
) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None; // (start_token, n, end_token)
    for n in lo..=hi {
        if tokens.len() < n * min_run {
            break;
        }
        let equal_grams = |a: usize, b: usize| {
            (0..n).all(|k| token_at(text, tokens[a + k]) == token_at(text, tokens[b + k]))
        };
        let mut i = 0;
        while i + n * min_run <= tokens.len() {
            let mut runs = 1;
            while i + (runs + 1) * n <= tokens.len() && equal_grams(i, i + runs * n) {
                runs += 1;
            }
            if runs >= min_run {
                match best {
                    Some((s, _, _)) if s <= i => {}
                    _ => best = Some((i, n, i + runs * n - 1)),
                }
                break; // earliest hit for this n found; smaller start may exist for other n
            }
            i += 1;
        }
    }
    best.map(|(s, _, e)| (tokens[s].0, tokens[e].1))
}

/// Sentence split on {., !, ?, 。, ！, ？} followed by whitespace or EOL.
fn split_sentences(text: &str) -> Vec<(String, usize, usize)> {
    const TERMINATORS: [char; 6] = ['.', '!', '?', '\u{3002}', '\u{FF01}', '\u{FF1F}'];
    let mut units = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, ch)) = chars.next() {
        if TERMINATORS.contains(&ch) {
            let boundary = match chars.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if boundary {
                let end = i + ch.len_utf8();
                push_unit(&mut units, text, start, end);
                start = end;
            }
        }
    }
    push_unit(&mut units, text, start, text.len());
    units
}

/// Paragraph split on blank lines.
fn split_paragraphs(text: &str) -> Vec<(String, usize, usize)> {
    let mut units = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\n' {
            // A blank line is a newline followed only by whitespace up to the
            // next newline.
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j] == b' ' || bytes[j] == b'\t' || bytes[j] == b'\r') {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'\n' {
                push_unit(&mut units, text, start, i);
                while j < bytes.len() && text[j..].starts_with(['\n', ' ', '\t', '\r']) {
                    j += 1;
                }
                start = j;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    push_unit(&mut units, text, start, text.len());
    units
}

fn push_unit(units: &mut Vec<(String, usize, usize)>, text: &str, start: usize, end: usize) {
    if start >= end {
        return;
    }
    let raw = &text[start..end];
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return;
    }
    let lead = raw.len() - raw.trim_start().len();
    units.push((trimmed.to_string(), start + lead, start + lead + trimmed.len()));
}

fn unit_run(units: &[(String, usize, usize)], min_run: usize) -> Option<(usize, usize)> {
    let mut i = 0;
    while i < units.len() {
        let mut j = i + 1;
        while j < units.len() && units[j].0 == units[i].0 {
            j += 1;
        }
        if j - i >= min_run {
            return Some((units[i].1, units[j - 1].2));
        }
        i = j;
    }
    None
}

/// What happens to a sample when a rule matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    Drop,
    Flag,
}

/// Compiled rule parameters, one variant per rule kind.
#[derive(Debug, Clone)]
pub enum RuleParams {
    /// Assistant text matching any catalog pattern.
    RefusalPattern { patterns: Vec<Regex> },
    /// Assistant text carrying localization or prior-turn markup the question
    /// never asked for.
    StrayReference { patterns: Vec<Regex>, question_exempt: Option<Regex> },
    /// Any single assistant turn longer than `max_chars` characters.
    LengthCap { max_chars: usize },
    /// The same (question, answer) pair appearing twice within one sample.
    DuplicateQa,
    /// Question matches but the answer fails to match what it requires.
    PromptMismatch { question_pattern: Regex, answer_must_match: Regex },
    /// Multi-granularity repeated content in an assistant turn.
    Repetition { config: RepetitionConfig },
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub name: String,
    pub action: RuleAction,
    pub params: RuleParams,
}

/// Ordered rule list; evaluation order is the declaration order.
#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Result<Self, FilterConfigError> {
        let mut seen = BTreeSet::new();
        for rule in &rules {
            if !seen.insert(rule.name.clone()) {
                return Err(FilterConfigError::DuplicateRuleName(rule.name.clone()));
            }
            if let RuleParams::Repetition { config } = &rule.params {
                config.validate()?;
            }
        }
        Ok(RuleSet { rules })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// The bundled default catalog: refusals, stray references, a 20k length
    /// cap, within-sample duplicate QA pairs, and repetition with default
    /// thresholds. Rules from the explicit catalog default to drop.
    pub fn default_catalog() -> Self {
        let refusal = parse_patterns(DEFAULT_REFUSAL_PATTERNS)
            .expect("bundled refusal catalog compiles");
        let stray = parse_patterns(DEFAULT_STRAY_PATTERNS)
            .expect("bundled stray-reference catalog compiles");
        RuleSet::new(vec![
            Rule {
                name: "refusal".into(),
                action: RuleAction::Drop,
                params: RuleParams::RefusalPattern { patterns: refusal },
            },
            Rule {
                name: "stray_reference".into(),
                action: RuleAction::Drop,
                params: RuleParams::StrayReference {
                    patterns: stray,
                    question_exempt: Some(
                        Regex::new(r"(?i)\b(box|bound|locat\w*|where|region|coordinates?|position)\b")
                            .expect("exempt pattern compiles"),
                    ),
                },
            },
            Rule {
                name: "length_cap".into(),
                action: RuleAction::Drop,
                params: RuleParams::LengthCap { max_chars: 20_000 },
            },
            Rule {
                name: "duplicate_qa".into(),
                action: RuleAction::Drop,
                params: RuleParams::DuplicateQa,
            },
            Rule {
                name: "repetition".into(),
                action: RuleAction::Drop,
                params: RuleParams::Repetition { config: RepetitionConfig::default() },
            },
        ])
        .expect("default catalog is well-formed")
    }
}

/// Parse a pattern file body: one regex per line, `#` comments, blank lines
/// ignored.
pub fn parse_patterns(body: &str) -> Result<Vec<Regex>, regex::Error> {
    body.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(Regex::new)
        .collect()
}

pub fn load_pattern_file(path: impl AsRef<Path>) -> Result<Vec<Regex>, FilterConfigError> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|source| FilterConfigError::PatternFile {
        path: path.display().to_string(),
        source,
    })?;
    parse_patterns(&body).map_err(|source| FilterConfigError::BadPattern {
        rule: path.display().to_string(),
        source,
    })
}

/// On-disk rule description; compiled into [`Rule`] at load time so pattern
/// errors surface as configuration errors, never per-sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<RuleAction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub patterns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_exempt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_chars: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_must_match: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition: Option<RepetitionConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RuleSetSpec {
    #[serde(default, rename = "rule")]
    pub rules: Vec<RuleSpec>,
}

/// Kinds from the bundled catalog default to drop; custom kinds default to flag.
fn default_action(kind: &str) -> RuleAction {
    match kind {
        "refusal_pattern" | "stray_reference" | "length_cap" | "duplicate_qa" | "repetition" => {
            RuleAction::Drop
        }
        _ => RuleAction::Flag,
    }
}

impl RuleSetSpec {
    /// Compile specs into an executable [`RuleSet`]. `base_dir` anchors
    /// relative `patterns_file` paths.
    pub fn compile(&self, base_dir: Option<&Path>) -> Result<RuleSet, FilterConfigError> {
        let mut rules = Vec::with_capacity(self.rules.len());
        for spec in &self.rules {
            let compile_one = |p: &String| {
                Regex::new(p).map_err(|source| FilterConfigError::BadPattern {
                    rule: spec.name.clone(),
                    source,
                })
            };
            let mut patterns: Vec<Regex> =
                spec.patterns.iter().map(compile_one).collect::<Result<_, _>>()?;
            if let Some(file) = &spec.patterns_file {
                let path = match base_dir {
                    Some(dir) => dir.join(file),
                    None => Path::new(file).to_path_buf(),
                };
                patterns.extend(load_pattern_file(path)?);
            }
            let action = spec.action.unwrap_or_else(|| default_action(&spec.kind));
            let params = match spec.kind.as_str() {
                "refusal_pattern" => RuleParams::RefusalPattern { patterns },
                "stray_reference" => RuleParams::StrayReference {
                    patterns,
                    question_exempt: spec
                        .question_exempt
                        .as_ref()
                        .map(compile_one)
                        .transpose()?,
                },
                "length_cap" => RuleParams::LengthCap {
                    max_chars: spec.max_chars.ok_or_else(|| FilterConfigError::Invalid {
                        rule: spec.name.clone(),
                        message: "length_cap requires max_chars".into(),
                    })?,
                },
                "duplicate_qa" => RuleParams::DuplicateQa,
                "repetition" => RuleParams::Repetition {
                    config: spec.repetition.clone().unwrap_or_default(),
                },
                // Custom kinds: either a plain answer-pattern rule or a
                // question/answer mismatch rule, depending on what is given.
                _ => match (&spec.question_pattern, &spec.answer_must_match) {
                    (Some(q), Some(a)) => RuleParams::PromptMismatch {
                        question_pattern: compile_one(q)?,
                        answer_must_match: compile_one(a)?,
                    },
                    _ if !patterns.is_empty() => RuleParams::RefusalPattern { patterns },
                    _ => {
                        return Err(FilterConfigError::Invalid {
                            rule: spec.name.clone(),
                            message: format!(
                                "kind `{}` needs patterns or question_pattern + answer_must_match",
                                spec.kind
                            ),
                        })
                    }
                },
            };
            rules.push(Rule { name: spec.name.clone(), action, params });
        }
        RuleSet::new(rules)
    }
}

/// The decision one stage renders for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub kind: VerdictKind,
    pub reason: String,
    pub stage: String,
}

impl FilterVerdict {
    pub fn keep(stage: &str) -> Self {
        FilterVerdict { kind: VerdictKind::Keep, reason: String::new(), stage: stage.into() }
    }

    pub fn drop(stage: &str, reason: impl Into<String>) -> Self {
        FilterVerdict { kind: VerdictKind::Drop, reason: reason.into(), stage: stage.into() }
    }

    pub fn flag(stage: &str, reason: impl Into<String>) -> Self {
        FilterVerdict { kind: VerdictKind::Flag, reason: reason.into(), stage: stage.into() }
    }
}

fn rule_matches(rule: &Rule, sample: &Sample) -> bool {
    let assistant_turns =
        sample.turns.iter().filter(|t| t.role == Role::Assistant).map(|t| t.text.as_str());
    match &rule.params {
        RuleParams::RefusalPattern { patterns } => {
            let mut turns = assistant_turns;
            turns.any(|text| patterns.iter().any(|p| p.is_match(text)))
        }
        RuleParams::StrayReference { patterns, question_exempt } => {
            if let Some(exempt) = question_exempt {
                if exempt.is_match(&sample.question_text()) {
                    return false;
                }
            }
            let mut turns = assistant_turns;
            turns.any(|text| patterns.iter().any(|p| p.is_match(text)))
        }
        RuleParams::LengthCap { max_chars } => {
            let mut turns = assistant_turns;
            turns.any(|text| text.chars().count() > *max_chars)
        }
        RuleParams::DuplicateQa => {
            let mut seen = BTreeSet::new();
            sample.turns.chunks_exact(2).any(|pair| {
                let key = (
                    pair[0].text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase(),
                    pair[1].text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase(),
                );
                !seen.insert(key)
            })
        }
        RuleParams::PromptMismatch { question_pattern, answer_must_match } => {
            let answer = assistant_turns.collect::<Vec<_>>().join("\n");
            question_pattern.is_match(&sample.question_text()) && !answer_must_match.is_match(&answer)
        }
        RuleParams::Repetition { config } => {
            if config.exempt_task_types.contains(&sample.task_type) {
                return false;
            }
            let mut turns = assistant_turns;
            turns.any(|text| detect_repetition(text, config).is_some())
        }
    }
}

/// Evaluate the ordered rule list against one sample. The first matching
/// drop-rule wins; flag-rule hits accumulate into the reason list; a sample
/// nothing matched is kept. The sample itself is never touched.
pub fn apply_rules(sample: &Sample, rules: &RuleSet) -> FilterVerdict {
    let mut flags: Vec<&str> = Vec::new();
    for rule in rules.rules() {
        if rule_matches(rule, sample) {
            match rule.action {
                RuleAction::Drop => return FilterVerdict::drop(STAGE_NAME, rule.name.clone()),
                RuleAction::Flag => flags.push(&rule.name),
            }
        }
    }
    if flags.is_empty() {
        FilterVerdict::keep(STAGE_NAME)
    } else {
        FilterVerdict::flag(STAGE_NAME, flags.join(","))
    }
}

/// Streams routed by [`run_filter_stage`]; kept, dropped, and flagged
/// partition the input.
#[derive(Debug, Default)]
pub struct FilterStageOutput {
    pub kept: Vec<Sample>,
    pub dropped: Vec<Sample>,
    pub flagged: Vec<Sample>,
    pub stats: StageStats,
}

/// Run the rule stage over a corpus. Every routed sample's lineage gains
/// exactly one event. Rule evaluation is per-sample parallel; output order is
/// restored by sample id.
pub fn run_filter_stage(
    samples: Vec<Sample>,
    rules: &RuleSet,
    stamp: &LineageStamp,
) -> FilterStageOutput {
    let verdicts: Vec<FilterVerdict> =
        samples.par_iter().map(|sample| apply_rules(sample, rules)).collect();

    let mut out = FilterStageOutput {
        stats: StageStats::new(STAGE_NAME, samples.len() as u64),
        ..FilterStageOutput::default()
    };
    for (mut sample, verdict) in samples.into_iter().zip(verdicts) {
        let reason = if verdict.reason.is_empty() { "clean" } else { verdict.reason.as_str() };
        sample.push_lineage(stamp.event(STAGE_NAME, verdict.kind, reason));
        match verdict.kind {
            VerdictKind::Drop => {
                out.stats.dropped += 1;
                out.dropped.push(sample);
            }
            VerdictKind::Flag => {
                // Flagged samples stay in the corpus; the separate stream is
                // the review queue.
                out.stats.kept += 1;
                out.stats.flagged += 1;
                out.flagged.push(sample);
            }
            _ => {
                out.stats.kept += 1;
                out.kept.push(sample);
            }
        }
    }
    for stream in [&mut out.kept, &mut out.dropped, &mut out.flagged] {
        stream.sort_by(|a, b| a.id.cmp(&b.id));
    }
    debug_assert!(out.stats.is_conserved());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::sample;
    use crate::corpus::Turn;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn stamp() -> LineageStamp {
        LineageStamp::new(chrono::Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap(), "fp")
    }

    #[test]
    fn token_run_detected_with_defaults() {
        let text = "go ".repeat(12);
        let finding = detect_repetition(&text, &RepetitionConfig::default()).unwrap();
        assert_eq!(finding.level, RepetitionLevel::Token);
    }

    #[test]
    fn nine_tokens_below_threshold() {
        let text = "go ".repeat(9);
        assert_eq!(detect_repetition(&text, &RepetitionConfig::default()), None);
    }

    #[test]
    fn sentence_run_detected() {
        let text = "The sky is blue. ".repeat(3);
        let finding = detect_repetition(&text, &RepetitionConfig::default()).unwrap();
        assert_eq!(finding.level, RepetitionLevel::Sentence);
    }

    #[test]
    fn clean_sentence_yields_none() {
        let text = "A quick brown fox jumps over the lazy dog.";
        assert_eq!(detect_repetition(text, &RepetitionConfig::default()), None);
    }

    #[test]
    fn paragraph_run_detected() {
        let para = "This block talks about one topic in two lines.\nIt continues here.";
        let text = format!("{para}\n\n{para}");
        let finding = detect_repetition(&text, &RepetitionConfig::default()).unwrap();
        assert_eq!(finding.level, RepetitionLevel::Paragraph);
    }

    /// Brute-force n-gram oracle: for every n in the range and every start,
    /// literally count consecutive repeats by slicing token vectors.
    fn brute_force_phrase(text: &str, cfg: &RepetitionConfig) -> bool {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let (lo, hi) = cfg.phrase_len_range;
        for n in lo..=hi {
            for start in 0..tokens.len() {
                let mut runs = 0;
                let mut pos = start;
                while pos + n <= tokens.len() && tokens[pos..pos + n] == tokens[start..start + n] {
                    runs += 1;
                    pos += n;
                }
                if runs >= cfg.phrase_run_min {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn six_token_phrase_repeated_five_times() {
        let phrase = "alpha beta gamma delta epsilon zeta ";
        let text = phrase.repeat(5);
        let cfg = RepetitionConfig::default();
        assert!(brute_force_phrase(&text, &cfg), "oracle must agree the phrase repeats");
        let finding = detect_repetition(&text, &cfg).unwrap();
        assert_eq!(finding.level, RepetitionLevel::Phrase);
    }

    #[test]
    fn phrase_detection_agrees_with_oracle_on_mixed_cases() {
        let cfg = RepetitionConfig {
            token_run_min: 1000, // silence token level so phrase level is observable
            sentence_repeat_min: 1000,
            paragraph_repeat_min: 1000,
            ..RepetitionConfig::default()
        };
        let cases = [
            ("one two one two one two one two one two", true),
            ("one two three one two three one two", false),
            ("a b c d e f g h i j k l m n o p", false),
            ("x y z x y z x y z x y z x y z done", true),
        ];
        for (text, _) in cases {
            let expected = brute_force_phrase(text, &cfg);
            let got = detect_repetition(text, &cfg)
                .map(|f| f.level == RepetitionLevel::Phrase)
                .unwrap_or(false);
            assert_eq!(got, expected, "disagreement on: {text}");
        }
    }

    fn with_answer(answer: &str) -> Sample {
        let mut s = sample("r1");
        s.turns = vec![Turn::user("Describe the image contents."), Turn::assistant(answer)];
        s
    }

    #[test]
    fn refusal_is_dropped_by_catalog() {
        let s = with_answer("As an AI developed by OpenAI, I cannot see the image you provided.");
        let verdict = apply_rules(&s, &RuleSet::default_catalog());
        assert_eq!(verdict.kind, VerdictKind::Drop);
        assert_eq!(verdict.reason, "refusal");
    }

    #[test]
    fn stray_box_dropped_unless_question_asks() {
        let s = with_answer("The dog is here <box>(12,40),(88,91)</box> as requested.");
        let verdict = apply_rules(&s, &RuleSet::default_catalog());
        assert_eq!(verdict.kind, VerdictKind::Drop);
        assert_eq!(verdict.reason, "stray_reference");

        let mut localization = s.clone();
        localization.turns[0].text = "Where is the dog? Give the bounding box.".into();
        let verdict = apply_rules(&localization, &RuleSet::default_catalog());
        assert_eq!(verdict.kind, VerdictKind::Keep);
    }

    #[test]
    fn length_cap_fires_past_limit() {
        let s = with_answer(&"x".repeat(20_001));
        let verdict = apply_rules(&s, &RuleSet::default_catalog());
        assert_eq!(verdict.kind, VerdictKind::Drop);
        assert_eq!(verdict.reason, "length_cap");

        let ok = with_answer(&"x".repeat(20_000));
        assert_eq!(apply_rules(&ok, &RuleSet::default_catalog()).kind, VerdictKind::Keep);
    }

    #[test]
    fn duplicate_qa_pair_detected() {
        let mut s = sample("dqa");
        s.turns = vec![
            Turn::user("How many cats?"),
            Turn::assistant("Two."),
            Turn::user("How many cats?"),
            Turn::assistant("Two."),
        ];
        let verdict = apply_rules(&s, &RuleSet::default_catalog());
        assert_eq!(verdict.kind, VerdictKind::Drop);
        assert_eq!(verdict.reason, "duplicate_qa");
    }

    #[test]
    fn custom_rule_defaults_to_flag() {
        let spec = RuleSetSpec {
            rules: vec![RuleSpec {
                name: "format_check".into(),
                kind: "prompt_mismatch".into(),
                action: None,
                patterns: vec![],
                patterns_file: None,
                question_exempt: None,
                max_chars: None,
                question_pattern: Some("(?i)option letter".into()),
                answer_must_match: Some("^[A-D]$".into()),
                repetition: None,
            }],
        };
        let rules = spec.compile(None).unwrap();
        let mut s = sample("pm");
        s.turns = vec![
            Turn::user("Answer with the option letter only."),
            Turn::assistant("The answer is clearly B because of the colors."),
        ];
        let verdict = apply_rules(&s, &rules);
        assert_eq!(verdict.kind, VerdictKind::Flag);
        assert_eq!(verdict.reason, "format_check");
    }

    #[test]
    fn bad_pattern_is_config_error() {
        let spec = RuleSetSpec {
            rules: vec![RuleSpec {
                name: "broken".into(),
                kind: "refusal_pattern".into(),
                action: None,
                patterns: vec!["([unclosed".into()],
                patterns_file: None,
                question_exempt: None,
                max_chars: None,
                question_pattern: None,
                answer_must_match: None,
                repetition: None,
            }],
        };
        assert!(matches!(spec.compile(None), Err(FilterConfigError::BadPattern { .. })));
    }

    #[test]
    fn stage_routes_and_conserves() {
        let clean: Vec<Sample> = (0..4)
            .map(|i| {
                let mut s = sample(&format!("c{i}"));
                s.turns[1].text = format!("A perfectly reasonable answer number {i}.");
                s
            })
            .collect();
        let mut poisoned = sample("poisoned");
        poisoned.turns[1].text = "loop ".repeat(40);
        let mut input = clean.clone();
        input.push(poisoned.clone());

        let out = run_filter_stage(input, &RuleSet::default_catalog(), &stamp());
        assert_eq!(out.kept.len(), 4);
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].id, "poisoned");
        assert_eq!(out.stats.input, 5);
        assert!(out.stats.is_conserved());
        assert!(out.kept.iter().all(|s| s.lineage.len() == 1));

        // Same corpus, poisoned sample exempted by task type.
        let mut exempt = poisoned;
        exempt.task_type = TaskType::OcrQa;
        let mut input = clean;
        input.push(exempt);
        let out = run_filter_stage(input, &RuleSet::default_catalog(), &stamp());
        assert_eq!(out.kept.len(), 5);
        assert_eq!(out.dropped.len(), 0);
    }

    #[test]
    fn five_clean_samples_all_kept() {
        let input: Vec<Sample> = (0..5)
            .map(|i| {
                let mut s = sample(&format!("k{i}"));
                s.turns[1].text = format!("Sample answer {i} with ordinary prose.");
                s
            })
            .collect();
        let out = run_filter_stage(input, &RuleSet::default_catalog(), &stamp());
        assert_eq!(out.kept.len(), 5);
        assert_eq!(out.stats.dropped, 0);
    }

    proptest! {
        /// Appending more repetitions of the found unit never erases a finding.
        #[test]
        fn monotone_under_appended_repetitions(
            word in "[a-z]{2,6}",
            extra in 0usize..5,
        ) {
            let cfg = RepetitionConfig::default();
            let base = format!("{} ", word).repeat(cfg.token_run_min);
            prop_assert!(detect_repetition(&base, &cfg).is_some());
            let appended = format!("{base}{}", format!("{} ", word).repeat(extra));
            prop_assert!(detect_repetition(&appended, &cfg).is_some());
        }

        /// Verdicts are a pure per-sample function: corpus order cannot matter.
        #[test]
        fn verdicts_independent_of_corpus_order(n in 1usize..8, rot in 0usize..8) {
            let samples: Vec<Sample> = (0..n)
                .map(|i| {
                    let mut s = sample(&format!("s{i}"));
                    if i % 2 == 0 {
                        s.turns[1].text = "word ".repeat(15);
                    }
                    s
                })
                .collect();
            let rules = RuleSet::default_catalog();
            let forward: Vec<_> = samples.iter().map(|s| apply_rules(s, &rules)).collect();
            let mut rotated = samples.clone();
            rotated.rotate_left(rot % n);
            for (i, s) in rotated.iter().enumerate() {
                let orig_idx = (i + rot % n) % n;
                prop_assert_eq!(&apply_rules(s, &rules), &forward[orig_idx]);
            }
        }
    }
}
