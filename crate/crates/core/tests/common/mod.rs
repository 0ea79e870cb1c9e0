//! Shared fixtures for integration tests: the scripted judge backend the
//! smoke corpus runs against.

use metabolize::judge::mock::{MockJudgeServer, MockReply};

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Scripted replies for the smoke corpus. Routing is driven by marker tokens
/// embedded in the fixture questions, so every sample's path through the
/// pipeline is fixed by its content.
pub fn smoke_judge_handler(request: &serde_json::Value) -> MockReply {
    let task = request["task"].as_str().unwrap_or("");
    let prompt = request["prompt"].as_str().unwrap_or("");
    match task {
        "relevance" => {
            if prompt.contains("MARKER_CONFLICT") {
                MockReply::text("conflicting")
            } else if prompt.contains("MARKER_UNSCI") {
                MockReply::text("unrelated but contains scientific knowledge")
            } else if prompt.contains("MARKER_UNREL") {
                MockReply::text("unrelated")
            } else {
                MockReply::text("related")
            }
        }
        "answer_text_only" => {
            if prompt.contains("TEXTDOM_MC") {
                MockReply::text("The answer is (B)")
            } else {
                MockReply::text("The answer is 9996")
            }
        }
        "quality_binary" => {
            if prompt.contains("BADSOURCE") || prompt.contains("LOWQUAL") {
                MockReply::text("fail: low quality response")
            } else {
                MockReply::text("pass")
            }
        }
        "generate_rewrite" => MockReply::text(
            "A detailed, self-contained explanation that expands the short reference answer \
             with the relevant reasoning and context.",
        ),
        "verify_rewrite" => MockReply::text("pass"),
        "generate_cot" => {
            MockReply::text("Pair the items and add them: two plus two makes four. The answer is 4")
        }
        "verify_cot" => MockReply::text("pass"),
        other => MockReply::status(400, format!("{{\"error\":\"unknown task {other}\"}}")),
    }
}

pub fn start_smoke_server() -> MockJudgeServer {
    MockJudgeServer::start_with(smoke_judge_handler)
}
