//! Human-readable and machine-readable rendering of a diagnosis plus the
//! iteration ledger it reacted to.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{display_score, CatabolismError, DiagnosisReport};
use crate::pipeline::IterationLedger;

/// Write `report.md`, `regressions.csv`, `group_means.csv`, and
/// `mixture.csv` under `out_dir`; returns the written paths.
pub fn emit_report(
    diagnosis: &DiagnosisReport,
    ledger: &IterationLedger,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, CatabolismError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let md_path = out_dir.join("report.md");
    std::fs::write(&md_path, render_markdown(diagnosis, ledger))?;
    written.push(md_path);

    let mut regressions_csv = String::from("benchmark,delta\n");
    for regression in &diagnosis.regressions {
        let _ = writeln!(regressions_csv, "{},{:.4}", regression.benchmark, regression.delta);
    }
    let reg_path = out_dir.join("regressions.csv");
    std::fs::write(&reg_path, regressions_csv)?;
    written.push(reg_path);

    let mut means_csv = String::from("group,mean,delta\n");
    for (group, mean) in &diagnosis.group_means {
        let delta = diagnosis
            .group_deltas
            .get(group)
            .map(|d| format!("{d:.4}"))
            .unwrap_or_default();
        let _ = writeln!(means_csv, "{group},{mean:.4},{delta}");
    }
    let means_path = out_dir.join("group_means.csv");
    std::fs::write(&means_path, means_csv)?;
    written.push(means_path);

    let mut mixture_csv = String::from("bucket,dimension,key,count\n");
    for (bucket, mix) in &ledger.mixture.buckets {
        let _ = writeln!(mixture_csv, "{bucket},total,,{}", mix.total);
        for (source, count) in &mix.per_source {
            let _ = writeln!(mixture_csv, "{bucket},source,{source},{count}");
        }
        for (task, count) in &mix.per_task {
            let _ = writeln!(mixture_csv, "{bucket},task,{task},{count}");
        }
    }
    let mixture_path = out_dir.join("mixture.csv");
    std::fs::write(&mixture_path, mixture_csv)?;
    written.push(mixture_path);

    Ok(written)
}

fn render_markdown(diagnosis: &DiagnosisReport, ledger: &IterationLedger) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Iteration report: {}", diagnosis.model_id);
    let _ = writeln!(md);
    let _ = writeln!(
        md,
        "Iteration {} compared against iteration {}; regression tolerance {} points.",
        diagnosis.iteration, diagnosis.previous_iteration, diagnosis.tolerance
    );
    let _ = writeln!(md);

    let _ = writeln!(md, "## Capability group means");
    let _ = writeln!(md);
    if diagnosis.group_means.is_empty() {
        let _ = writeln!(md, "No complete capability group in this report.");
    } else {
        let _ = writeln!(md, "| group | mean | delta |");
        let _ = writeln!(md, "|---|---|---|");
        for (group, mean) in &diagnosis.group_means {
            let delta = diagnosis
                .group_deltas
                .get(group)
                .map(|d| format!("{}{}", if *d >= 0.0 { "+" } else { "" }, display_score(*d)))
                .unwrap_or_else(|| "-".to_string());
            let _ = writeln!(md, "| {group} | {} | {delta} |", display_score(*mean));
        }
    }
    let _ = writeln!(md);

    let _ = writeln!(md, "## Benchmarks beyond tolerance");
    let _ = writeln!(md);
    if diagnosis.regressions.is_empty() {
        let _ = writeln!(md, "No regressions beyond tolerance.");
    } else {
        let _ = writeln!(md, "| benchmark | delta |");
        let _ = writeln!(md, "|---|---|");
        for regression in &diagnosis.regressions {
            let sign = if regression.delta >= 0.0 { "+" } else { "" };
            let _ =
                writeln!(md, "| {} | {sign}{} |", regression.benchmark, display_score(regression.delta));
        }
    }
    let _ = writeln!(md);

    let _ = writeln!(md, "## Diagnosis flags");
    let _ = writeln!(md);
    if diagnosis.flags.is_empty() {
        let _ = writeln!(md, "No category flags raised.");
    } else {
        for flag in &diagnosis.flags {
            let _ = writeln!(md, "- **{:?}**", flag.category);
            for line in &flag.evidence {
                let _ = writeln!(md, "  - {line}");
            }
        }
    }
    let _ = writeln!(md);

    let _ = writeln!(md, "## Data flow, before and after");
    let _ = writeln!(md);
    let _ = writeln!(
        md,
        "Corpus iteration {}: {} samples in, {} curated out.",
        ledger.iteration,
        ledger.input_total,
        ledger.final_kept()
    );
    let _ = writeln!(md);
    let _ = writeln!(md, "| stage | enabled | in | kept | dropped | converted | rewritten | quarantined | flagged |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|---|");
    for stats in &ledger.stage_stats {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            stats.stage,
            if stats.enabled { "yes" } else { "no" },
            stats.input,
            stats.kept,
            stats.dropped,
            stats.converted,
            stats.rewritten,
            stats.quarantined,
            stats.flagged
        );
    }
    let _ = writeln!(md);

    let _ = writeln!(md, "## Resulting mixture");
    let _ = writeln!(md);
    for (bucket, mix) in &ledger.mixture.buckets {
        let _ = writeln!(md, "### {bucket} ({} samples)", mix.total);
        let _ = writeln!(md);
        if mix.per_source.is_empty() {
            let _ = writeln!(md, "Empty bucket.");
        } else {
            let _ = writeln!(md, "| source | count |");
            let _ = writeln!(md, "|---|---|");
            for (source, count) in &mix.per_source {
                let _ = writeln!(md, "| {source} | {count} |");
            }
        }
        let _ = writeln!(md);
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catabolism::{DiagnosisReport, Regression};
    use crate::pipeline::{MixtureManifest, StageStats};
    use std::collections::BTreeMap;

    fn empty_diagnosis() -> DiagnosisReport {
        DiagnosisReport {
            model_id: "capy-7b".into(),
            iteration: 2,
            previous_iteration: 1,
            tolerance: 1.0,
            group_means: BTreeMap::new(),
            group_deltas: BTreeMap::new(),
            deltas: BTreeMap::new(),
            regressions: Vec::new(),
            flags: Vec::new(),
        }
    }

    fn tiny_ledger() -> IterationLedger {
        IterationLedger {
            iteration: 2,
            seed: 7,
            config_fingerprint: "fp".into(),
            input_total: 5,
            stage_stats: vec![StageStats { kept: 5, ..StageStats::new("dedup", 5) }],
            mixture: MixtureManifest::default(),
        }
    }

    #[test]
    fn empty_diagnosis_renders_no_regressions_line() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&empty_diagnosis(), &tiny_ledger(), dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let md = std::fs::read_to_string(&files[0]).unwrap();
        assert!(md.contains("No regressions beyond tolerance."));
        assert!(md.contains("# Iteration report: capy-7b"));
    }

    #[test]
    fn one_regression_yields_one_csv_row() {
        let mut diagnosis = empty_diagnosis();
        diagnosis.regressions.push(Regression { benchmark: "MMVet".into(), delta: -5.0 });
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&diagnosis, &tiny_ledger(), dir.path()).unwrap();
        let csv = std::fs::read_to_string(&files[1]).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 2, "header + 1 row");
        assert!(rows[1].starts_with("MMVet,-5.0000"));
    }
}
