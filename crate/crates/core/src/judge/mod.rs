//! External-model scoring client: relevance triage, binary quality scoring,
//! text-only answerability voting, and rewrite/CoT verification over a fixed
//! wire protocol, with an on-disk response cache, retries, and a hard bound
//! on in-flight requests.
//!
//! Wire protocol: `POST {endpoint}/v1/judge` with JSON body
//! `{task, model_id, prompt, images, params}`; the backend replies
//! `{text, model_id}`. Any non-200 status is retryable.

pub mod mock;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{QuestionType, Sample};
use crate::fingerprint::{fnv1a_128, hex128};
use crate::improve::{answers_match, extract_final_answer, AnswerPatterns};

/// Environment variable naming the judge endpoint, e.g. `http://host:port`.
pub const ENDPOINT_ENV: &str = "JUDGE_ENDPOINT";
/// Environment variable holding the bearer credential, if any.
pub const API_KEY_ENV: &str = "JUDGE_API_KEY";

/// What the judge is being asked to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeTask {
    Relevance,
    QualityBinary,
    AnswerTextOnly,
    VerifyRewrite,
    VerifyCot,
    GenerateRewrite,
    GenerateCot,
}

impl JudgeTask {
    pub fn as_str(&self) -> &'static str {
        match self {
            JudgeTask::Relevance => "relevance",
            JudgeTask::QualityBinary => "quality_binary",
            JudgeTask::AnswerTextOnly => "answer_text_only",
            JudgeTask::VerifyRewrite => "verify_rewrite",
            JudgeTask::VerifyCot => "verify_cot",
            JudgeTask::GenerateRewrite => "generate_rewrite",
            JudgeTask::GenerateCot => "generate_cot",
        }
    }
}

/// Sample-derived content shipped to the judge.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgePayload {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_uris: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// Trial index for repeated-voting tasks; distinct trials must be
    /// distinct requests so the vote matrix is audit-complete.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { temperature: 0.0, max_tokens: 1024 }
    }
}

/// One scoring request; the cache key is a pure function of its fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub task: JudgeTask,
    pub model_id: String,
    pub payload: JudgePayload,
    pub decode_params: DecodeParams,
}

impl JudgeRequest {
    /// 128-bit content hash of (task, model_id, payload, decode_params).
    pub fn cache_key(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serialization is infallible");
        hex128(fnv1a_128(canonical.as_bytes()))
    }
}

/// Four-way relevance verdict. `UnrelatedSci` is the salvage path: the
/// question ignores the image but carries scientific knowledge worth keeping
/// as text-only data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Related,
    UnrelatedSci,
    Unrelated,
    Conflicting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binary {
    Pass,
    Fail,
}

/// Parsed verdict; generation tasks carry free text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Verdict {
    Relevance(Relevance),
    Binary(Binary),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub verdict: Verdict,
    pub raw: String,
    pub model_id: String,
    pub cached: bool,
}

/// Client behaviour knobs.
#[derive(Debug, Clone)]
pub struct ClientPolicy {
    pub max_in_flight: usize,
    pub retry_max: u32,
    pub backoff_base: Duration,
    pub cache_dir: Option<PathBuf>,
    pub request_timeout: Duration,
}

impl Default for ClientPolicy {
    fn default() -> Self {
        ClientPolicy {
            max_in_flight: 8,
            retry_max: 3,
            backoff_base: Duration::from_millis(250),
            cache_dir: None,
            request_timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("endpoint not configured: set {ENDPOINT_ENV} or pass an endpoint")]
    EndpointMissing,
    #[error("policy invalid: {0}")]
    PolicyInvalid(String),
    #[error("retries exhausted after {attempts} attempts: {last_error}")]
    RetriesExhausted { attempts: u32, last_error: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("verdict grammar: task {task} cannot parse reply {raw:?}")]
    Grammar { task: &'static str, raw: String },
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

/// Parse a raw reply under the task's published answer grammar. Replies that
/// fit no grammar are errors, never silent passes.
///
/// Relevance grammar (case-insensitive, checked in order): a reply containing
/// "conflict" is conflicting; containing "unrelated" plus "scien" is
/// unrelated_sci; containing "unrelated" alone is unrelated; containing
/// "related" is related. Binary grammar: the reply must contain exactly one
/// of "pass" or "fail". Generation tasks accept any text.
pub fn parse_verdict(task: JudgeTask, raw: &str) -> Result<Verdict, JudgeError> {
    let lowered = raw.trim().to_lowercase();
    match task {
        JudgeTask::Relevance => {
            let relevance = if lowered.contains("conflict") {
                Relevance::Conflicting
            } else if lowered.contains("unrelated") {
                if lowered.contains("scien") {
                    Relevance::UnrelatedSci
                } else {
                    Relevance::Unrelated
                }
            } else if lowered.contains("related") {
                Relevance::Related
            } else {
                return Err(JudgeError::Grammar { task: task.as_str(), raw: raw.to_string() });
            };
            Ok(Verdict::Relevance(relevance))
        }
        JudgeTask::QualityBinary | JudgeTask::VerifyRewrite | JudgeTask::VerifyCot => {
            match (lowered.contains("pass"), lowered.contains("fail")) {
                (true, false) => Ok(Verdict::Binary(Binary::Pass)),
                (false, true) => Ok(Verdict::Binary(Binary::Fail)),
                _ => Err(JudgeError::Grammar { task: task.as_str(), raw: raw.to_string() }),
            }
        }
        JudgeTask::AnswerTextOnly | JudgeTask::GenerateRewrite | JudgeTask::GenerateCot => {
            Ok(Verdict::Text(raw.to_string()))
        }
    }
}

/// Versioned prompt templates, one per task. `{{question}}`, `{{answer}}`,
/// and `{{reference}}` are substituted from the payload.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: Vec<(JudgeTask, String)>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        PromptLibrary {
            templates: vec![
                (JudgeTask::Relevance, include_str!("../../assets/templates/relevance.txt").into()),
                (
                    JudgeTask::QualityBinary,
                    include_str!("../../assets/templates/quality_binary.txt").into(),
                ),
                (
                    JudgeTask::AnswerTextOnly,
                    include_str!("../../assets/templates/answer_text_only.txt").into(),
                ),
                (
                    JudgeTask::VerifyRewrite,
                    include_str!("../../assets/templates/verify_rewrite.txt").into(),
                ),
                (
                    JudgeTask::VerifyCot,
                    include_str!("../../assets/templates/verify_cot.txt").into(),
                ),
                (
                    JudgeTask::GenerateRewrite,
                    include_str!("../../assets/templates/generate_rewrite.txt").into(),
                ),
                (
                    JudgeTask::GenerateCot,
                    include_str!("../../assets/templates/generate_cot.txt").into(),
                ),
            ],
        }
    }
}

impl PromptLibrary {
    /// Load template overrides from a directory of `<task>.txt` files;
    /// missing files keep the bundled default.
    pub fn with_overrides(dir: &std::path::Path) -> std::io::Result<Self> {
        let mut lib = PromptLibrary::default();
        for (task, text) in &mut lib.templates {
            let candidate = dir.join(format!("{}.txt", task.as_str()));
            if candidate.is_file() {
                *text = std::fs::read_to_string(candidate)?;
            }
        }
        Ok(lib)
    }

    pub fn render(&self, task: JudgeTask, payload: &JudgePayload) -> String {
        let template = self
            .templates
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, text)| text.as_str())
            .expect("every task has a template");
        template
            .replace("{{question}}", &payload.question)
            .replace("{{answer}}", payload.answer.as_deref().unwrap_or(""))
            .replace("{{reference}}", payload.reference.as_deref().unwrap_or(""))
    }
}

/// Counting semaphore bounding concurrent HTTP calls.
struct Gate {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct GatePermit<'a>(&'a Gate);

impl Gate {
    fn new(permits: usize) -> Self {
        Gate { permits: Mutex::new(permits), cv: Condvar::new() }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut permits = self.permits.lock().expect("gate lock");
        while *permits == 0 {
            permits = self.cv.wait(permits).expect("gate wait");
        }
        *permits -= 1;
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut permits = self.0.permits.lock().expect("gate lock");
        *permits += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    task: &'a str,
    model_id: &'a str,
    prompt: &'a str,
    images: &'a [String],
    params: DecodeParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireResponse {
    text: String,
    model_id: String,
}

/// Blocking judge client, shareable across pipeline worker threads.
pub struct JudgeClient {
    endpoint: String,
    api_key: Option<String>,
    policy: ClientPolicy,
    prompts: PromptLibrary,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl JudgeClient {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        policy: ClientPolicy,
    ) -> Result<Self, JudgeError> {
        let endpoint = endpoint.into();
        if endpoint.is_empty() {
            return Err(JudgeError::EndpointMissing);
        }
        if policy.max_in_flight == 0 {
            return Err(JudgeError::PolicyInvalid("max_in_flight must be >= 1".into()));
        }
        if let Some(dir) = &policy.cache_dir {
            std::fs::create_dir_all(dir)?;
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(policy.request_timeout)
            .build()
            .map_err(|e| JudgeError::Protocol(format!("http client: {e}")))?;
        let gate = Gate::new(policy.max_in_flight);
        Ok(JudgeClient {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key,
            policy,
            prompts: PromptLibrary::default(),
            http,
            gate,
        })
    }

    /// Build a client from `JUDGE_ENDPOINT` / `JUDGE_API_KEY`.
    pub fn from_env(policy: ClientPolicy) -> Result<Self, JudgeError> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| JudgeError::EndpointMissing)?;
        let api_key = std::env::var(API_KEY_ENV).ok();
        JudgeClient::new(endpoint, api_key, policy)
    }

    pub fn set_prompts(&mut self, prompts: PromptLibrary) {
        self.prompts = prompts;
    }

    pub fn policy(&self) -> &ClientPolicy {
        &self.policy
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.policy.cache_dir.as_ref().map(|dir| dir.join(format!("{key}.json")))
    }

    fn cache_read(&self, key: &str) -> Result<Option<WireResponse>, JudgeError> {
        let Some(path) = self.cache_path(key) else { return Ok(None) };
        match std::fs::read_to_string(&path) {
            Ok(body) => {
                let wire: WireResponse = serde_json::from_str(&body).map_err(|e| {
                    JudgeError::Protocol(format!("corrupt cache entry {}: {e}", path.display()))
                })?;
                Ok(Some(wire))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn cache_write(&self, key: &str, wire: &WireResponse) -> Result<(), JudgeError> {
        let Some(path) = self.cache_path(key) else { return Ok(()) };
        use std::sync::atomic::{AtomicU64, Ordering};
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let tmp = path.with_extension(format!(
            "tmp.{}.{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, serde_json::to_vec(wire).expect("wire serialization"))?;
        // Atomic publish; concurrent writers of the same key write identical
        // bytes, so last-writer-wins is harmless.
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Send one request. Cache hits return the stored response with
    /// `cached = true` and perform no network call; misses make at most
    /// `retry_max + 1` attempts with exponential backoff and persist the
    /// response keyed by the request's content hash.
    pub fn send(&self, request: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let key = request.cache_key();
        if let Some(wire) = self.cache_read(&key)? {
            let verdict = parse_verdict(request.task, &wire.text)?;
            return Ok(JudgeResponse {
                verdict,
                raw: wire.text,
                model_id: wire.model_id,
                cached: true,
            });
        }

        let prompt = self.prompts.render(request.task, &request.payload);
        let body = WireRequest {
            task: request.task.as_str(),
            model_id: &request.model_id,
            prompt: &prompt,
            images: &request.payload.image_uris,
            params: request.decode_params,
        };

        let _permit = self.gate.acquire();
        let url = format!("{}/v1/judge", self.endpoint);
        let mut attempt: u32 = 0;
        let wire: WireResponse = loop {
            let result = (|| -> Result<WireResponse, String> {
                let mut req = self.http.post(&url).json(&body);
                if let Some(key) = &self.api_key {
                    req = req.bearer_auth(key);
                }
                let resp = req.send().map_err(|e| format!("transport: {e}"))?;
                let status = resp.status();
                let text = resp.text().map_err(|e| format!("read body: {e}"))?;
                if !status.is_success() {
                    return Err(format!("status {status}: {text}"));
                }
                serde_json::from_str::<WireResponse>(&text)
                    .map_err(|e| format!("bad response body: {e}"))
            })();
            match result {
                Ok(wire) => break wire,
                Err(last_error) => {
                    if attempt >= self.policy.retry_max {
                        return Err(JudgeError::RetriesExhausted {
                            attempts: attempt + 1,
                            last_error,
                        });
                    }
                    std::thread::sleep(self.policy.backoff_base * 2u32.pow(attempt));
                    attempt += 1;
                }
            }
        };

        let verdict = parse_verdict(request.task, &wire.text)?;
        self.cache_write(&key, &wire)?;
        Ok(JudgeResponse { verdict, raw: wire.text, model_id: wire.model_id, cached: false })
    }

    /// Classify image-question relevance for a sample with at least one image.
    pub fn score_relevance(&self, sample: &Sample, model_id: &str) -> Result<Relevance, JudgeError> {
        if !sample.has_images() {
            return Err(JudgeError::Precondition(format!(
                "sample {} has no images; relevance scoring needs at least one",
                sample.id
            )));
        }
        let request = JudgeRequest {
            task: JudgeTask::Relevance,
            model_id: model_id.to_string(),
            payload: JudgePayload {
                question: sample.question_text(),
                image_uris: sample.images.iter().map(|i| i.uri.clone()).collect(),
                ..JudgePayload::default()
            },
            decode_params: DecodeParams::default(),
        };
        match self.send(&request)?.verdict {
            Verdict::Relevance(r) => Ok(r),
            other => Err(JudgeError::Protocol(format!("expected relevance verdict, got {other:?}"))),
        }
    }

    /// Binary quality score for a long-form sample; the rationale is the raw
    /// reply, preserved for audit.
    pub fn score_quality(&self, sample: &Sample, model_id: &str) -> Result<QualityScore, JudgeError> {
        if sample.question_type != QuestionType::LongForm {
            return Err(JudgeError::Precondition(format!(
                "sample {} is {}; quality scoring applies to long_form",
                sample.id, sample.question_type
            )));
        }
        let request = JudgeRequest {
            task: JudgeTask::QualityBinary,
            model_id: model_id.to_string(),
            payload: JudgePayload {
                question: sample.question_text(),
                answer: sample.reference_answer().map(str::to_string),
                image_uris: sample.images.iter().map(|i| i.uri.clone()).collect(),
                ..JudgePayload::default()
            },
            decode_params: DecodeParams::default(),
        };
        let response = self.send(&request)?;
        match response.verdict {
            Verdict::Binary(verdict) => Ok(QualityScore { verdict, rationale: response.raw }),
            other => Err(JudgeError::Protocol(format!("expected binary verdict, got {other:?}"))),
        }
    }

    /// Ask `models` to answer the question from text alone, `trials` times
    /// each. Returns true only when every (model, trial) answer matches the
    /// ground truth under the answer-extraction grammar. All `3 x trials`
    /// calls are made even after the first miss so the vote matrix is
    /// complete for audit.
    pub fn vote_text_dominant(
        &self,
        sample: &Sample,
        models: &[String],
        trials: u32,
    ) -> Result<VoteOutcome, JudgeError> {
        if !matches!(sample.question_type, QuestionType::MultipleChoice | QuestionType::ShortForm) {
            return Err(JudgeError::Precondition(format!(
                "sample {} is {}; text-only voting applies to multiple_choice and short_form",
                sample.id, sample.question_type
            )));
        }
        if models.len() != 3 {
            return Err(JudgeError::Precondition(format!(
                "text-only voting needs exactly 3 model ids, got {}",
                models.len()
            )));
        }
        if models.iter().collect::<BTreeSet<_>>().len() != 3 {
            return Err(JudgeError::Precondition("the 3 voting models must be distinct".into()));
        }
        if trials == 0 {
            return Err(JudgeError::Precondition("trials must be >= 1".into()));
        }
        let truth = sample
            .reference_answer()
            .filter(|a| !a.is_empty())
            .ok_or_else(|| {
                JudgeError::Precondition(format!("sample {} has no ground-truth answer", sample.id))
            })?
            .to_string();

        let patterns = AnswerPatterns::bundled();
        let mut votes = Vec::with_capacity(models.len() * trials as usize);
        for model in models {
            for trial in 0..trials {
                let request = JudgeRequest {
                    task: JudgeTask::AnswerTextOnly,
                    model_id: model.clone(),
                    payload: JudgePayload {
                        question: sample.question_text(),
                        trial: Some(trial),
                        ..JudgePayload::default()
                    },
                    decode_params: DecodeParams::default(),
                };
                let response = self.send(&request)?;
                let raw = match response.verdict {
                    Verdict::Text(t) => t,
                    other => {
                        return Err(JudgeError::Protocol(format!(
                            "expected text verdict, got {other:?}"
                        )))
                    }
                };
                let extracted = extract_final_answer(&raw, sample.question_type, &patterns).ok();
                let matched = extracted
                    .as_deref()
                    .map(|ans| answers_match(ans, &truth, sample.question_type))
                    .unwrap_or(false);
                votes.push(VoteRecord {
                    model: model.clone(),
                    trial,
                    answer: extracted,
                    matched,
                });
            }
        }
        let text_dominant = votes.iter().all(|v| v.matched);
        Ok(VoteOutcome { text_dominant, votes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub verdict: Binary,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub model: String,
    pub trial: u32,
    pub answer: Option<String>,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub text_dominant: bool,
    pub votes: Vec<VoteRecord>,
}

#[cfg(test)]
mod tests {
    use super::mock::{MockJudgeServer, MockReply};
    use super::*;
    use crate::corpus::test_support::{sample, sample_with_image};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn client_for(server: &MockJudgeServer, cache: Option<&std::path::Path>) -> JudgeClient {
        let policy = ClientPolicy {
            backoff_base: Duration::from_millis(2),
            cache_dir: cache.map(|p| p.to_path_buf()),
            ..ClientPolicy::default()
        };
        JudgeClient::new(server.endpoint(), None, policy).unwrap()
    }

    fn quality_request(marker: &str) -> JudgeRequest {
        JudgeRequest {
            task: JudgeTask::QualityBinary,
            model_id: "judge-model".into(),
            payload: JudgePayload { question: marker.to_string(), ..JudgePayload::default() },
            decode_params: DecodeParams::default(),
        }
    }

    #[test]
    fn cache_key_is_pure_function_of_content() {
        let a = quality_request("q");
        let b = quality_request("q");
        assert_eq!(a.cache_key(), b.cache_key());
        let c = quality_request("different");
        assert_ne!(a.cache_key(), c.cache_key());
        let mut d = quality_request("q");
        d.decode_params.temperature = 0.7;
        assert_ne!(a.cache_key(), d.cache_key());
    }

    #[test]
    fn second_identical_send_hits_cache_with_zero_network_calls() {
        let server = MockJudgeServer::start_with(|_| MockReply::text("pass"));
        let dir = tempfile::tempdir().unwrap();
        let client = client_for(&server, Some(dir.path()));
        let req = quality_request("cached?");
        let first = client.send(&req).unwrap();
        assert!(!first.cached);
        let calls_after_first = server.total_requests();
        let second = client.send(&req).unwrap();
        assert!(second.cached);
        assert_eq!(server.total_requests(), calls_after_first, "cache hit must not hit network");
        assert_eq!(first.verdict, second.verdict);
        assert_eq!(first.raw, second.raw);
    }

    #[test]
    fn two_failures_then_success_within_policy() {
        let server = MockJudgeServer::start_with(|_| MockReply::text("pass"));
        server.fail_next(2);
        let client = client_for(&server, None);
        let resp = client.send(&quality_request("retry me")).unwrap();
        assert_eq!(resp.verdict, Verdict::Binary(Binary::Pass));
        assert_eq!(server.total_requests(), 3, "2 failures + 1 success");
    }

    #[test]
    fn retries_exhaust_after_policy_limit() {
        let server = MockJudgeServer::start_with(|_| MockReply::text("pass"));
        server.fail_next(100);
        let policy = ClientPolicy {
            retry_max: 2,
            backoff_base: Duration::from_millis(1),
            ..ClientPolicy::default()
        };
        let client = JudgeClient::new(server.endpoint(), None, policy).unwrap();
        let err = client.send(&quality_request("doomed")).unwrap_err();
        match err {
            JudgeError::RetriesExhausted { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("expected RetriesExhausted, got {other:?}"),
        }
        assert_eq!(server.total_requests(), 3);
    }

    #[test]
    fn unparseable_binary_reply_is_grammar_error() {
        let server = MockJudgeServer::start_with(|_| MockReply::text("maybe"));
        let client = client_for(&server, None);
        let err = client.send(&quality_request("hmm")).unwrap_err();
        assert!(matches!(err, JudgeError::Grammar { .. }), "got {err:?}");
    }

    #[test]
    fn relevance_grammar_covers_all_four_verdicts() {
        for (reply, expected) in [
            ("related", Relevance::Related),
            ("unrelated", Relevance::Unrelated),
            ("unrelated but contains scientific knowledge", Relevance::UnrelatedSci),
            ("conflicting", Relevance::Conflicting),
            ("The question conflicts with the image.", Relevance::Conflicting),
        ] {
            match parse_verdict(JudgeTask::Relevance, reply).unwrap() {
                Verdict::Relevance(r) => assert_eq!(r, expected, "reply {reply:?}"),
                other => panic!("unexpected verdict {other:?}"),
            }
        }
        assert!(parse_verdict(JudgeTask::Relevance, "no idea").is_err());
    }

    #[test]
    fn score_relevance_requires_image_and_maps_verdict() {
        let server = MockJudgeServer::start_with(|_| MockReply::text("conflicting"));
        let client = client_for(&server, None);
        let with_image = sample_with_image("rel1", "img/x.png");
        assert_eq!(
            client.score_relevance(&with_image, "vlm-large").unwrap(),
            Relevance::Conflicting
        );
        let text_only = sample("rel2");
        assert!(matches!(
            client.score_relevance(&text_only, "vlm-large"),
            Err(JudgeError::Precondition(_))
        ));
    }

    #[test]
    fn score_quality_preserves_rationale_and_checks_type() {
        let server =
            MockJudgeServer::start_with(|_| MockReply::text("fail: logical inconsistency"));
        let client = client_for(&server, None);
        let mut long_form = sample("q1");
        long_form.question_type = QuestionType::LongForm;
        let score = client.score_quality(&long_form, "judge-xl").unwrap();
        assert_eq!(score.verdict, Binary::Fail);
        assert!(score.rationale.contains("logical inconsistency"));

        let mc = sample("q2"); // short_form by default
        assert!(matches!(client.score_quality(&mc, "judge-xl"), Err(JudgeError::Precondition(_))));
    }

    #[test]
    fn vote_requires_objective_type_and_counts_all_calls() {
        let server = MockJudgeServer::start_with(|_| MockReply::text("The answer is 4"));
        let client = client_for(&server, None);
        let s = sample("v1"); // short_form, truth "4"
        let models = vec!["m1".to_string(), "m2".to_string(), "m3".to_string()];
        let outcome = client.vote_text_dominant(&s, &models, 2).unwrap();
        assert!(outcome.text_dominant);
        assert_eq!(outcome.votes.len(), 6);
        assert_eq!(server.total_requests(), 6, "3 models x 2 trials, no short-circuit");

        let mut lf = sample("v2");
        lf.question_type = QuestionType::LongForm;
        assert!(matches!(
            client.vote_text_dominant(&lf, &models, 1),
            Err(JudgeError::Precondition(_))
        ));
    }

    #[test]
    fn one_wrong_vote_defeats_dominance_without_short_circuit() {
        let hits = Arc::new(AtomicUsize::new(0));
        let hits_in_handler = hits.clone();
        let server = MockJudgeServer::start_with(move |req| {
            let n = hits_in_handler.fetch_add(1, Ordering::SeqCst);
            let model = req["model_id"].as_str().unwrap_or("");
            // First call from m2 answers wrong; everyone else is right.
            if model == "m2" && n < 4 {
                MockReply::text("The answer is 5")
            } else {
                MockReply::text("The answer is 4")
            }
        });
        let client = client_for(&server, None);
        let s = sample("v3");
        let models = vec!["m1".to_string(), "m2".to_string(), "m3".to_string()];
        let outcome = client.vote_text_dominant(&s, &models, 1).unwrap();
        assert!(!outcome.text_dominant);
        assert_eq!(outcome.votes.len(), 3, "all votes collected despite the miss");
        assert_eq!(outcome.votes.iter().filter(|v| !v.matched).count(), 1);
    }

    #[test]
    fn in_flight_bound_holds_under_parallel_load() {
        let server = MockJudgeServer::start_with(|_| {
            std::thread::sleep(Duration::from_millis(15));
            MockReply::text("pass")
        });
        let policy = ClientPolicy {
            max_in_flight: 4,
            backoff_base: Duration::from_millis(1),
            ..ClientPolicy::default()
        };
        let client = Arc::new(JudgeClient::new(server.endpoint(), None, policy).unwrap());
        let mut handles = Vec::new();
        for i in 0..32 {
            let client = client.clone();
            handles.push(std::thread::spawn(move || {
                client.send(&quality_request(&format!("burst {i}"))).unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(
            server.max_concurrent() <= 4,
            "observed {} concurrent requests with max_in_flight 4",
            server.max_concurrent()
        );
        assert_eq!(server.total_requests(), 32);
    }

    #[test]
    fn prompt_templates_render_payload_fields() {
        let lib = PromptLibrary::default();
        let payload = JudgePayload {
            question: "What is shown?".into(),
            answer: Some("A red kite.".into()),
            reference: Some("kite".into()),
            ..JudgePayload::default()
        };
        let rendered = lib.render(JudgeTask::VerifyRewrite, &payload);
        assert!(rendered.contains("What is shown?"));
        assert!(rendered.contains("A red kite."));
        assert!(rendered.contains("kite"));
        assert!(!rendered.contains("{{"));
    }

    #[test]
    fn fingerprint_helper_reused_for_config_hashes() {
        // Guard against accidental divergence between request keys and the
        // generic fingerprint helper; both must stay 32 hex chars.
        assert_eq!(crate::fingerprint::fingerprint("x").len(), 32);
        assert_eq!(quality_request("x").cache_key().len(), 32);
    }
}
