//! Canonical sample schema, taxonomy, interchange parsing, and corpus statistics.
//!
//! The interchange format is JSON Lines: one UTF-8 record per `\n`-terminated
//! line. Unknown fields on a record are carried through untouched so corpora
//! from third-party collections survive round-trips.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Literal placeholder token marking an image position inside turn text.
pub const IMAGE_PLACEHOLDER: &str = "<image>";

/// Ten task-type groups a sample is organized under.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Caption,
    GeneralQa,
    Conversation,
    OcrQa,
    DocKie,
    Chart,
    Math,
    Knowledge,
    DomainSpecific,
    TextOnly,
}

impl TaskType {
    pub const ALL: [TaskType; 10] = [
        TaskType::Caption,
        TaskType::GeneralQa,
        TaskType::Conversation,
        TaskType::OcrQa,
        TaskType::DocKie,
        TaskType::Chart,
        TaskType::Math,
        TaskType::Knowledge,
        TaskType::DomainSpecific,
        TaskType::TextOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::Caption => "caption",
            TaskType::GeneralQa => "general_qa",
            TaskType::Conversation => "conversation",
            TaskType::OcrQa => "ocr_qa",
            TaskType::DocKie => "doc_kie",
            TaskType::Chart => "chart",
            TaskType::Math => "math",
            TaskType::Knowledge => "knowledge",
            TaskType::DomainSpecific => "domain_specific",
            TaskType::TextOnly => "text_only",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task_type `{s}`"))
    }
}

/// Answer-format classification of the question.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    YesNo,
    MultipleChoice,
    ShortForm,
    LongForm,
    Caption,
}

impl QuestionType {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuestionType::YesNo => "yes_no",
            QuestionType::MultipleChoice => "multiple_choice",
            QuestionType::ShortForm => "short_form",
            QuestionType::LongForm => "long_form",
            QuestionType::Caption => "caption",
        }
    }

    /// Objective types have a single checkable answer token.
    pub fn is_objective(&self) -> bool {
        matches!(
            self,
            QuestionType::YesNo | QuestionType::MultipleChoice | QuestionType::ShortForm
        )
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the reference response came from.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSource {
    GroundTruth,
    HumanAnnotation,
    ModelGenerated,
}

/// Speaker of a conversation turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

/// One conversation turn. `image_slots` is derived from the text rather than
/// stored, so it can never drift out of sync.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn { role: Role::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn { role: Role::Assistant, text: text.into() }
    }

    /// Count of image-placeholder tokens in this turn's text.
    pub fn image_slots(&self) -> usize {
        self.text.matches(IMAGE_PLACEHOLDER).count()
    }
}

/// Reference to one image belonging to a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phash: Option<u64>,
}

impl ImageRef {
    pub fn new(uri: impl Into<String>) -> Self {
        ImageRef { uri: uri.into(), width: None, height: None, phash: None }
    }
}

/// Verdict kind a pipeline stage can render for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Keep,
    Drop,
    Flag,
    ConvertTextOnly,
    RewritePending,
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VerdictKind::Keep => "keep",
            VerdictKind::Drop => "drop",
            VerdictKind::Flag => "flag",
            VerdictKind::ConvertTextOnly => "convert_text_only",
            VerdictKind::RewritePending => "rewrite_pending",
        };
        f.write_str(s)
    }
}

mod ts_seconds {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{self, Deserialize, Deserializer, Serializer};

    // Pin the rendering to whole seconds so re-serialization is byte-stable.
    pub fn serialize<S: Serializer>(dt: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&dt.to_rfc3339_opts(SecondsFormat::Secs, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|dt| dt.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

/// Append-only record of one pipeline verdict applied to a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEvent {
    pub stage: String,
    pub verdict: VerdictKind,
    pub reason: String,
    #[serde(with = "ts_seconds")]
    pub timestamp: DateTime<Utc>,
    pub config_fingerprint: String,
}

/// Shared (timestamp, config fingerprint) pair a stage stamps onto every
/// lineage event it emits. The timestamp comes from the run configuration so
/// replays are byte-identical.
#[derive(Debug, Clone)]
pub struct LineageStamp {
    pub timestamp: DateTime<Utc>,
    pub config_fingerprint: String,
}

impl LineageStamp {
    pub fn new(timestamp: DateTime<Utc>, config_fingerprint: impl Into<String>) -> Self {
        LineageStamp { timestamp, config_fingerprint: config_fingerprint.into() }
    }

    pub fn event(
        &self,
        stage: impl Into<String>,
        verdict: VerdictKind,
        reason: impl Into<String>,
    ) -> LineageEvent {
        LineageEvent {
            stage: stage.into(),
            verdict,
            reason: reason.into(),
            timestamp: self.timestamp,
            config_fingerprint: self.config_fingerprint.clone(),
        }
    }
}

/// One multimodal training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub source_dataset: String,
    #[serde(default)]
    pub images: Vec<ImageRef>,
    pub turns: Vec<Turn>,
    pub task_type: TaskType,
    pub question_type: QuestionType,
    pub response_source: ResponseSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_model: Option<String>,
    #[serde(default)]
    pub lineage: Vec<LineageEvent>,
    /// Unknown fields from third-party records, preserved verbatim.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Sample {
    /// All user-turn texts joined with a newline; the "question" side of the record.
    pub fn question_text(&self) -> String {
        self.turns
            .iter()
            .filter(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// The final assistant turn, treated as the reference answer when present.
    pub fn reference_answer(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::Assistant)
            .map(|t| t.text.as_str())
    }

    pub fn has_images(&self) -> bool {
        !self.images.is_empty()
    }

    /// Total image-placeholder tokens across all turns.
    pub fn placeholder_count(&self) -> usize {
        self.turns.iter().map(Turn::image_slots).sum()
    }

    pub fn push_lineage(&mut self, event: LineageEvent) {
        self.lineage.push(event);
    }

    /// Strip images and placeholder tokens, retagging the sample as text-only.
    pub fn convert_to_text_only(&mut self) {
        self.images.clear();
        for turn in &mut self.turns {
            if turn.image_slots() == 0 {
                continue;
            }
            let mut text = turn.text.replace(&format!("{IMAGE_PLACEHOLDER}\n"), "");
            text = text.replace(&format!("{IMAGE_PLACEHOLDER} "), "");
            text = text.replace(IMAGE_PLACEHOLDER, "");
            turn.text = text.trim().to_string();
        }
        self.task_type = TaskType::TextOnly;
    }

    /// Content identity ignoring `id` and `lineage`; used to count duplicates
    /// of the same underlying record.
    pub fn content_key(&self) -> String {
        let mut shadow = self.clone();
        shadow.id = String::new();
        shadow.lineage = Vec::new();
        serde_json::to_string(&shadow).expect("sample serialization is infallible")
    }

    /// Check every per-record invariant; `parse_sample` calls this and
    /// programmatically built samples can re-check through it.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be non-empty".into());
        }
        if self.source_dataset.is_empty() {
            return Err("source_dataset must be non-empty".into());
        }
        check_alternation(&self.turns)?;
        if self.response_source == ResponseSource::ModelGenerated
            && self.generator_model.as_deref().unwrap_or("").is_empty()
        {
            return Err("model_generated response requires generator_model".into());
        }
        if self.images.is_empty() && self.placeholder_count() > 0 {
            return Err(format!(
                "text-only sample carries the {IMAGE_PLACEHOLDER} placeholder"
            ));
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.uri.is_empty() {
                return Err(format!("images[{i}].uri must be non-empty"));
            }
            match (img.width, img.height) {
                (Some(w), Some(h)) => {
                    if w == 0 || h == 0 {
                        return Err(format!("images[{i}] dimensions must be positive"));
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(format!(
                        "images[{i}] width/height must both be present or both absent"
                    ))
                }
            }
        }
        Ok(())
    }
}

fn check_alternation(turns: &[Turn]) -> Result<(), String> {
    if turns.len() < 2 {
        return Err("conversation needs at least one user and one assistant turn".into());
    }
    for (i, turn) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if turn.role != expected {
            return Err(format!(
                "turn {i} must be {expected:?}: turns alternate user/assistant starting with user"
            ));
        }
    }
    Ok(())
}

/// Why a line failed to become a valid [`Sample`].
#[derive(Debug, Error)]
pub enum ParseError {
    /// Not valid JSON / UTF-8.
    #[error("malformed record: {0}")]
    Malformed(String),
    /// Structurally valid JSON that violates the schema (missing field,
    /// unknown enum string, wrong type).
    #[error("schema violation: {0}")]
    Schema(String),
    /// Schema-valid record that breaks a sample invariant.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

/// Parse one interchange line into a validated [`Sample`].
pub fn parse_sample(line: &str) -> Result<Sample, ParseError> {
    let sample: Sample = serde_json::from_str(line).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => ParseError::Schema(e.to_string()),
            _ => ParseError::Malformed(e.to_string()),
        }
    })?;
    sample.check_invariants().map_err(ParseError::Invariant)?;
    Ok(sample)
}

/// Render a sample as its canonical single-line interchange form.
pub fn serialize_sample(sample: &Sample) -> String {
    serde_json::to_string(sample).expect("sample serialization is infallible")
}

/// Errors reading a corpus file.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: ParseError,
    },
}

/// Read a whole JSON Lines corpus, failing on the first bad record.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Sample>, CorpusError> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample =
            parse_sample(&line).map_err(|source| CorpusError::Record { line: idx + 1, source })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Write samples in interchange form, one record per line.
pub fn write_corpus(path: impl AsRef<Path>, samples: &[Sample]) -> std::io::Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for sample in samples {
        w.write_all(serialize_sample(sample).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// One problem found by [`validate_corpus`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    DuplicateId { id: String },
    AlternationViolation { id: String, detail: String },
    PlaceholderMismatch { id: String, placeholders: usize, images: usize },
    InvariantViolation { id: String, detail: String },
}

/// Cross-record validation results; an empty report means a clean corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Validate a corpus: duplicate ids, alternation, placeholder/image mismatch,
/// and any other invariant break. Samples are never mutated.
pub fn validate_corpus<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = std::collections::HashSet::new();
    for sample in samples {
        if !seen.insert(sample.id.clone()) {
            report.issues.push(ValidationIssue::DuplicateId { id: sample.id.clone() });
        }
        if let Err(detail) = check_alternation(&sample.turns) {
            report
                .issues
                .push(ValidationIssue::AlternationViolation { id: sample.id.clone(), detail });
        } else if let Err(detail) = sample.check_invariants() {
            report
                .issues
                .push(ValidationIssue::InvariantViolation { id: sample.id.clone(), detail });
        }
        let placeholders = sample.placeholder_count();
        if !sample.images.is_empty() && placeholders != sample.images.len() {
            report.issues.push(ValidationIssue::PlaceholderMismatch {
                id: sample.id.clone(),
                placeholders,
                images: sample.images.len(),
            });
        }
    }
    report
}

/// Exact corpus counts, deterministic regardless of input order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: u64,
    pub per_source: BTreeMap<String, u64>,
    pub per_task: BTreeMap<TaskType, u64>,
    pub per_question_type: BTreeMap<QuestionType, u64>,
    pub per_response_source: BTreeMap<ResponseSource, u64>,
    /// Highest multiplicity of any content-identical record (id and lineage
    /// ignored); `None` for an empty corpus.
    pub max_duplicate_count: Option<u64>,
}

impl CorpusStats {
    /// Associative, commutative merge of partial stats.
    pub fn merge(mut self, other: CorpusStats) -> CorpusStats {
        self.total += other.total;
        for (k, v) in other.per_source {
            *self.per_source.entry(k).or_default() += v;
        }
        for (k, v) in other.per_task {
            *self.per_task.entry(k).or_default() += v;
        }
        for (k, v) in other.per_question_type {
            *self.per_question_type.entry(k).or_default() += v;
        }
        for (k, v) in other.per_response_source {
            *self.per_response_source.entry(k).or_default() += v;
        }
        self.max_duplicate_count = match (self.max_duplicate_count, other.max_duplicate_count) {
            (a, None) => a,
            (None, b) => b,
            (Some(a), Some(b)) => Some(a.max(b)),
        };
        self
    }
}

/// Compute [`CorpusStats`] over a stream of samples.
pub fn corpus_stats<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> CorpusStats {
    let mut stats = CorpusStats::default();
    let mut content_counts: BTreeMap<String, u64> = BTreeMap::new();
    for sample in samples {
        stats.total += 1;
        *stats.per_source.entry(sample.source_dataset.clone()).or_default() += 1;
        *stats.per_task.entry(sample.task_type).or_default() += 1;
        *stats.per_question_type.entry(sample.question_type).or_default() += 1;
        *stats.per_response_source.entry(sample.response_source).or_default() += 1;
        *content_counts.entry(sample.content_key()).or_default() += 1;
    }
    stats.max_duplicate_count = content_counts.values().max().copied();
    stats
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Minimal valid sample for tests across the crate.
    pub fn sample(id: &str) -> Sample {
        Sample {
            id: id.to_string(),
            source_dataset: "unit".to_string(),
            images: vec![],
            turns: vec![Turn::user("What is 2+2?"), Turn::assistant("4")],
            task_type: TaskType::Math,
            question_type: QuestionType::ShortForm,
            response_source: ResponseSource::GroundTruth,
            generator_model: None,
            lineage: vec![],
            extra: serde_json::Map::new(),
        }
    }

    pub fn sample_with_image(id: &str, uri: &str) -> Sample {
        let mut s = sample(id);
        s.images = vec![ImageRef::new(uri)];
        s.turns[0].text = format!("{IMAGE_PLACEHOLDER}\nWhat is 2+2?");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::{sample, sample_with_image};
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{"id":"s1","source_dataset":"unit","turns":[{"role":"user","text":"Q?"},{"role":"assistant","text":"A."}],"task_type":"math","question_type":"short_form","response_source":"ground_truth"}"#;

    #[test]
    fn minimal_record_parses_with_empty_lineage() {
        let s = parse_sample(MINIMAL).unwrap();
        assert_eq!(s.id, "s1");
        assert!(s.lineage.is_empty());
        assert!(s.images.is_empty());
    }

    #[test]
    fn unknown_task_type_is_schema_error() {
        let line = MINIMAL.replace("\"math\"", "\"dance\"");
        let err = parse_sample(&line).unwrap_err();
        assert!(matches!(err, ParseError::Schema(_)), "got {err:?}");
        assert!(err.to_string().contains("dance"));
    }

    #[test]
    fn model_generated_requires_generator_model() {
        let line = MINIMAL.replace("\"ground_truth\"", "\"model_generated\"");
        let err = parse_sample(&line).unwrap_err();
        assert!(matches!(err, ParseError::Invariant(_)), "got {err:?}");
    }

    #[test]
    fn malformed_json_is_malformed_error() {
        let err = parse_sample("{not json").unwrap_err();
        assert!(matches!(err, ParseError::Malformed(_)));
    }

    #[test]
    fn missing_field_is_schema_error() {
        let err = parse_sample(r#"{"id":"x"}"#).unwrap_err();
        assert!(matches!(err, ParseError::Schema(_)));
    }

    #[test]
    fn alternation_must_start_with_user() {
        let line = MINIMAL.replace(
            r#"[{"role":"user","text":"Q?"},{"role":"assistant","text":"A."}]"#,
            r#"[{"role":"assistant","text":"A."},{"role":"user","text":"Q?"}]"#,
        );
        let err = parse_sample(&line).unwrap_err();
        assert!(matches!(err, ParseError::Invariant(_)));
    }

    #[test]
    fn text_only_sample_rejects_placeholder() {
        let line = MINIMAL.replace("Q?", "<image> Q?");
        let err = parse_sample(&line).unwrap_err();
        assert!(matches!(err, ParseError::Invariant(_)));
    }

    #[test]
    fn unknown_extra_fields_round_trip() {
        let line = MINIMAL.replace(
            r#""id":"s1""#,
            r#""id":"s1","custom_score":0.75,"origin":{"shard":3}"#,
        );
        let s = parse_sample(&line).unwrap();
        assert_eq!(s.extra.len(), 2);
        let reparsed = parse_sample(&serialize_sample(&s)).unwrap();
        assert_eq!(s, reparsed);
    }

    #[test]
    fn duplicate_ids_are_reported() {
        let a = sample("a1");
        let b = sample("a1");
        let report = validate_corpus([&a, &b]);
        assert_eq!(
            report.issues,
            vec![ValidationIssue::DuplicateId { id: "a1".into() }]
        );
    }

    #[test]
    fn clean_corpus_has_empty_report() {
        let samples = [sample("a"), sample("b"), sample("c")];
        assert!(validate_corpus(samples.iter()).is_clean());
    }

    #[test]
    fn placeholder_image_mismatch_is_reported() {
        let mut s = sample_with_image("m1", "img.png");
        s.turns[0].text = format!("{IMAGE_PLACEHOLDER} {IMAGE_PLACEHOLDER} Q?");
        let report = validate_corpus([&s]);
        assert_eq!(
            report.issues,
            vec![ValidationIssue::PlaceholderMismatch {
                id: "m1".into(),
                placeholders: 2,
                images: 1
            }]
        );
    }

    #[test]
    fn stats_count_by_task() {
        let mut samples = Vec::new();
        for i in 0..4 {
            let mut s = sample(&format!("c{i}"));
            s.task_type = TaskType::Caption;
            s.question_type = QuestionType::Caption;
            s.turns[0].text = format!("caption request {i}");
            samples.push(s);
        }
        for i in 0..6 {
            let mut s = sample(&format!("m{i}"));
            s.turns[0].text = format!("math question {i}");
            samples.push(s);
        }
        let stats = corpus_stats(samples.iter());
        assert_eq!(stats.total, 10);
        assert_eq!(stats.per_task[&TaskType::Caption], 4);
        assert_eq!(stats.per_task[&TaskType::Math], 6);
    }

    #[test]
    fn empty_stream_yields_zero_stats() {
        let stats = corpus_stats(std::iter::empty());
        assert_eq!(stats.total, 0);
        assert!(stats.per_source.is_empty());
        assert_eq!(stats.max_duplicate_count, None);
    }

    /// Brute-force duplicate counter: O(n^2) pairwise content comparison,
    /// independent of the content_key path used by `corpus_stats`.
    fn brute_force_max_duplicates(samples: &[Sample]) -> Option<u64> {
        let stripped: Vec<Sample> = samples
            .iter()
            .map(|s| {
                let mut c = s.clone();
                c.id = String::new();
                c.lineage = Vec::new();
                c
            })
            .collect();
        stripped
            .iter()
            .map(|a| stripped.iter().filter(|b| *b == a).count() as u64)
            .max()
    }

    #[test]
    fn replicated_record_dominates_max_duplicate_count() {
        let mut samples = Vec::new();
        for i in 0..7 {
            samples.push(sample(&format!("rep{i}")));
        }
        for i in 0..5 {
            let mut s = sample(&format!("uniq{i}"));
            s.turns[0].text = format!("distinct question {i}");
            samples.push(s);
        }
        let expected = brute_force_max_duplicates(&samples);
        assert_eq!(expected, Some(7));
        let stats = corpus_stats(samples.iter());
        assert_eq!(stats.max_duplicate_count, expected);
    }

    #[test]
    fn per_maps_sum_to_total() {
        let samples: Vec<Sample> = (0..25)
            .map(|i| {
                let mut s = sample(&format!("s{i}"));
                s.task_type = TaskType::ALL[i % 10];
                s.source_dataset = format!("src{}", i % 3);
                s
            })
            .collect();
        let stats = corpus_stats(samples.iter());
        for (name, map_total) in [
            ("per_source", stats.per_source.values().sum::<u64>()),
            ("per_task", stats.per_task.values().sum::<u64>()),
            ("per_question_type", stats.per_question_type.values().sum::<u64>()),
            ("per_response_source", stats.per_response_source.values().sum::<u64>()),
        ] {
            assert_eq!(map_total, stats.total, "{name} does not conserve total");
        }
    }

    fn arb_turn_pair() -> impl Strategy<Value = Vec<Turn>> {
        (
            "[a-zA-Z0-9 ?]{1,40}",
            "[a-zA-Z0-9 .]{1,40}",
            proptest::option::of("[a-z ]{1,20}"),
        )
            .prop_map(|(q, a, follow)| {
                let mut turns = vec![Turn::user(q), Turn::assistant(a)];
                if let Some(f) = follow {
                    turns.push(Turn::user(f.clone()));
                    turns.push(Turn::assistant(format!("re: {f}")));
                }
                turns
            })
    }

    prop_compose! {
        fn arb_sample()(
            id in "[a-z0-9]{4,12}",
            source in "[a-z_]{3,10}",
            turns in arb_turn_pair(),
            task_idx in 0usize..10,
            q_idx in 0usize..5,
            with_image in any::<bool>(),
            phash in proptest::option::of(any::<u64>()),
        ) -> Sample {
            let question_types = [
                QuestionType::YesNo,
                QuestionType::MultipleChoice,
                QuestionType::ShortForm,
                QuestionType::LongForm,
                QuestionType::Caption,
            ];
            let mut s = sample(&id);
            s.source_dataset = source;
            s.turns = turns;
            s.task_type = TaskType::ALL[task_idx];
            s.question_type = question_types[q_idx];
            if with_image {
                s.images = vec![ImageRef {
                    uri: format!("img/{id}.png"),
                    width: Some(32),
                    height: Some(24),
                    phash,
                }];
                s.turns[0].text = format!("{IMAGE_PLACEHOLDER}\n{}", s.turns[0].text);
            }
            s
        }
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(s in arb_sample()) {
            let line = serialize_sample(&s);
            let back = parse_sample(&line).unwrap();
            prop_assert_eq!(s, back);
        }

        #[test]
        fn stats_are_permutation_invariant(mut samples in proptest::collection::vec(arb_sample(), 0..20), seed in any::<u64>()) {
            let forward = corpus_stats(samples.iter());
            // Deterministic shuffle by rotating and reversing based on the seed.
            let n = samples.len().max(1);
            samples.rotate_left(seed as usize % n);
            samples.reverse();
            let shuffled = corpus_stats(samples.iter());
            prop_assert_eq!(forward, shuffled);
        }
    }
}
