//! End-to-end CLI checks: exit codes, seed discipline, and byte-identical
//! replays through the `metabolize` binary itself.

mod common;

use std::path::Path;
use std::process::Command;

use common::{fixture_path, start_smoke_server};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metabolize"))
}

fn write_small_corpus(path: &Path, n: usize) {
    let mut body = String::new();
    for i in 0..n {
        body.push_str(&format!(
            r#"{{"id":"s{i:03}","source_dataset":"cli","turns":[{{"role":"user","text":"question {i}?"}},{{"role":"assistant","text":"answer {i}"}}],"task_type":"general_qa","question_type":"short_form","response_source":"ground_truth"}}"#
        ));
        body.push('\n');
    }
    std::fs::write(path, body).unwrap();
}

#[test]
fn stats_prints_totals_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    write_small_corpus(&corpus, 10);
    let output = bin().args(["stats", "--in"]).arg(&corpus).output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("\"total\": 10"), "stdout: {stdout}");
}

#[test]
fn run_without_seed_names_the_seed_rule() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    write_small_corpus(&corpus, 3);
    let plan = dir.path().join("plan.toml");
    std::fs::write(&plan, "[dedup]\nenabled = true\n").unwrap();
    let output = bin()
        .args(["run", "--plan"])
        .arg(&plan)
        .arg("--in")
        .arg(&corpus)
        .arg("--out")
        .arg(dir.path().join("out.jsonl"))
        .arg("--ledger")
        .arg(dir.path().join("ledger.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("seed"), "stderr must name the seed rule: {stderr}");
    assert!(stderr.contains("never"), "stderr must state seeds are never implicit: {stderr}");
}

#[test]
fn plan_incremental_emits_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mix.toml");
    let output = bin()
        .args(["plan", "incremental", "--new", "100000", "--old", "2000000", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let body = std::fs::read_to_string(&out).unwrap();
    assert!(body.contains("old_fraction = 0.1"), "plan file: {body}");
    assert!(body.contains("old_mixed = 200000"), "plan file: {body}");
}

#[test]
fn forced_fraction_out_of_bounds_exits_one() {
    let output = bin()
        .args(["plan", "incremental", "--new", "1", "--old", "10", "--fraction", "0.25"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("5%-20%"), "stderr: {stderr}");
}

#[test]
fn unknown_subcommand_and_flag_exit_one() {
    let output = bin().arg("transmogrify").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let output = bin().args(["stats", "--nonsense"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let output = bin().arg("--help").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
}

#[test]
fn ingest_flags_duplicate_ids() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("dup.jsonl");
    let line = r#"{"id":"same","source_dataset":"cli","turns":[{"role":"user","text":"q?"},{"role":"assistant","text":"a"}],"task_type":"general_qa","question_type":"short_form","response_source":"ground_truth"}"#;
    std::fs::write(&corpus, format!("{line}\n{line}\n")).unwrap();
    let output = bin().args(["ingest", "--in"]).arg(&corpus).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("duplicate_id"), "report: {stdout}");
}

#[test]
fn dedup_without_seed_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    write_small_corpus(&corpus, 3);
    let output = bin()
        .args(["dedup", "--in"])
        .arg(&corpus)
        .arg("--out")
        .arg(dir.path().join("out.jsonl"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn unreachable_judge_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(
        &corpus,
        r#"{"id":"lf","source_dataset":"cli","turns":[{"role":"user","text":"Explain."},{"role":"assistant","text":"Because."}],"task_type":"general_qa","question_type":"long_form","response_source":"ground_truth"}
"#,
    )
    .unwrap();
    let config = dir.path().join("cfg.toml");
    std::fs::write(&config, "retry_max = 0\nbackoff_ms = 1\n").unwrap();
    let output = bin()
        .args(["judge", "quality", "--in"])
        .arg(&corpus)
        .arg("--config")
        .arg(&config)
        .env("JUDGE_ENDPOINT", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn cli_replays_are_byte_identical_and_match_goldens() {
    let server = start_smoke_server();
    let dir = tempfile::tempdir().unwrap();

    let run_once = |tag: &str| -> (String, String) {
        let out = dir.path().join(format!("curated_{tag}.jsonl"));
        let ledger = dir.path().join(format!("ledger_{tag}.json"));
        let output = bin()
            .args(["run", "--plan"])
            .arg(fixture_path("smoke_plan.toml"))
            .arg("--in")
            .arg(fixture_path("smoke_corpus.jsonl"))
            .arg("--out")
            .arg(&out)
            .arg("--ledger")
            .arg(&ledger)
            .env("JUDGE_ENDPOINT", server.endpoint())
            .output()
            .unwrap();
        assert_eq!(
            output.status.code(),
            Some(0),
            "stderr: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        (
            std::fs::read_to_string(&out).unwrap(),
            std::fs::read_to_string(&ledger).unwrap(),
        )
    };

    let (curated_a, ledger_a) = run_once("a");
    let (curated_b, ledger_b) = run_once("b");
    assert_eq!(curated_a, curated_b, "same argv + inputs must replay identically");
    assert_eq!(ledger_a, ledger_b);

    let golden_curated = std::fs::read_to_string(fixture_path("golden_curated.jsonl")).unwrap();
    let golden_ledger = std::fs::read_to_string(fixture_path("golden_ledger.json")).unwrap();
    assert_eq!(curated_a, golden_curated, "CLI output diverged from the frozen golden");
    assert_eq!(ledger_a, golden_ledger);
}

#[test]
fn diagnose_and_report_chain() {
    let dir = tempfile::tempdir().unwrap();
    let write_csv = |name: &str, iteration: u32, hall: f64| -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(
            &path,
            format!(
                "model_id,iteration,benchmark,value\ncapy,{iteration},HallusionBench,{hall}\ncapy,{iteration},MMVet,65.4\n"
            ),
        )
        .unwrap();
        path
    };
    let previous = write_csv("prev.csv", 1, 50.6);
    let current = write_csv("cur.csv", 2, 53.0);
    let diag = dir.path().join("diag.json");
    let output = bin()
        .args(["diagnose", "--current"])
        .arg(&current)
        .arg("--previous")
        .arg(&previous)
        .arg("--tolerance")
        .arg("1.0")
        .arg("--out")
        .arg(&diag)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let body = std::fs::read_to_string(&diag).unwrap();
    assert!(body.contains("HallusionBench"), "diagnosis: {body}");

    let report_dir = dir.path().join("reports");
    let output = bin()
        .args(["report", "--diagnosis"])
        .arg(&diag)
        .arg("--ledger")
        .arg(fixture_path("golden_ledger.json"))
        .arg("--out-dir")
        .arg(&report_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let md = std::fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert!(md.contains("# Iteration report: capy"));
    assert!(md.contains("HallusionBench"));
    assert!(report_dir.join("regressions.csv").is_file());
    assert!(report_dir.join("group_means.csv").is_file());
    assert!(report_dir.join("mixture.csv").is_file());
}

#[test]
fn convert_via_cli_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("voted.jsonl");
    let mut body = String::new();
    for i in 0..10 {
        body.push_str(&format!(
            r#"{{"id":"v{i:02}","source_dataset":"cli","images":[{{"uri":"img/{i}.png","phash":{i}}}],"turns":[{{"role":"user","text":"<image>\nq {i}?"}},{{"role":"assistant","text":"B"}}],"task_type":"general_qa","question_type":"multiple_choice","response_source":"ground_truth"}}"#
        ));
        body.push('\n');
    }
    std::fs::write(&corpus, body).unwrap();
    let out = dir.path().join("converted.jsonl");
    let output = bin()
        .args(["convert", "--in"])
        .arg(&corpus)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "5", "--timestamp", "2026-01-01T00:00:00Z"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("converted=7"), "stderr: {stderr}");
    let text_only = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"text_only\""))
        .count();
    assert_eq!(text_only, 7);
}
