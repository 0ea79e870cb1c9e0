//! Per-iteration accounting: stage flow counts, the resulting data mixture,
//! and mixture diffs between iterations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sample, TaskType};

/// Flow counts for one pipeline stage.
///
/// Conservation: `in = kept + dropped + converted + rewritten + quarantined`.
/// `kept` counts untouched pass-throughs; converted and rewritten samples
/// continue downstream but are tallied separately. `flagged` is an
/// annotation on kept samples (the review queue), not a routing bucket.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub enabled: bool,
    #[serde(rename = "in")]
    pub input: u64,
    pub kept: u64,
    pub dropped: u64,
    pub converted: u64,
    pub rewritten: u64,
    pub quarantined: u64,
    pub flagged: u64,
}

impl StageStats {
    pub fn new(stage: &str, input: u64) -> Self {
        StageStats { stage: stage.to_string(), enabled: true, input, ..StageStats::default() }
    }

    /// A disabled stage passes everything through untouched.
    pub fn disabled(stage: &str, input: u64) -> Self {
        StageStats {
            stage: stage.to_string(),
            enabled: false,
            input,
            kept: input,
            ..StageStats::default()
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.input == self.kept + self.dropped + self.converted + self.rewritten + self.quarantined
    }

    /// Samples that continue into the next stage.
    pub fn surviving(&self) -> u64 {
        self.kept + self.converted + self.rewritten
    }
}

/// Counts of one training-stage bucket of the mixture.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketMix {
    pub total: u64,
    pub per_source: BTreeMap<String, u64>,
    pub per_task: BTreeMap<TaskType, u64>,
}

/// Per-bucket mixture of a curated corpus. Buckets follow the training-stage
/// split: sources named in the plan's `stage2_sources` land in `stage2`,
/// everything else in `stage3`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub buckets: BTreeMap<String, BucketMix>,
}

impl MixtureManifest {
    pub fn from_samples(samples: &[Sample], stage2_sources: &BTreeSet<String>) -> Self {
        let mut manifest = MixtureManifest::default();
        // Both buckets always exist so diffs are schema-stable.
        manifest.buckets.insert("stage2".to_string(), BucketMix::default());
        manifest.buckets.insert("stage3".to_string(), BucketMix::default());
        for sample in samples {
            let bucket = if stage2_sources.contains(&sample.source_dataset) {
                "stage2"
            } else {
                "stage3"
            };
            let mix = manifest.buckets.get_mut(bucket).expect("bucket pre-inserted");
            mix.total += 1;
            *mix.per_source.entry(sample.source_dataset.clone()).or_default() += 1;
            *mix.per_task.entry(sample.task_type).or_default() += 1;
        }
        manifest
    }
}

/// Machine record of one metabolism iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLedger {
    pub iteration: u64,
    pub seed: u64,
    pub config_fingerprint: String,
    pub input_total: u64,
    pub stage_stats: Vec<StageStats>,
    pub mixture: MixtureManifest,
}

impl IterationLedger {
    /// Check per-stage conservation, stage-to-stage chaining, and the global
    /// balance `input_total = final_kept + dropped + quarantined`.
    pub fn verify_conservation(&self) -> Result<(), String> {
        let mut expected_in = self.input_total;
        let mut total_dropped = 0u64;
        let mut total_quarantined = 0u64;
        for stats in &self.stage_stats {
            if !stats.is_conserved() {
                return Err(format!(
                    "stage {} does not conserve: in={} kept={} dropped={} converted={} rewritten={} quarantined={}",
                    stats.stage, stats.input, stats.kept, stats.dropped, stats.converted,
                    stats.rewritten, stats.quarantined
                ));
            }
            if stats.input != expected_in {
                return Err(format!(
                    "stage {} in={} but previous stage passed {}",
                    stats.stage, stats.input, expected_in
                ));
            }
            expected_in = stats.surviving();
            total_dropped += stats.dropped;
            total_quarantined += stats.quarantined;
        }
        let final_kept = expected_in;
        if self.input_total != final_kept + total_dropped + total_quarantined {
            return Err(format!(
                "global conservation broken: input {} != kept {} + dropped {} + quarantined {}",
                self.input_total, final_kept, total_dropped, total_quarantined
            ));
        }
        Ok(())
    }

    pub fn final_kept(&self) -> u64 {
        self.stage_stats.last().map(StageStats::surviving).unwrap_or(self.input_total)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serialization is infallible")
    }
}

#[derive(Debug, Error)]
pub enum MixtureDiffError {
    #[error("bucket schemas differ: left has {left:?}, right has {right:?}")]
    SchemaMismatch { left: Vec<String>, right: Vec<String> },
    #[error("bucket {bucket}: per-source deltas sum to {sum} but total delta is {total}")]
    ZeroSumViolation { bucket: String, sum: i64, total: i64 },
}

/// Signed per-bucket deltas between two mixtures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketDiff {
    pub total_delta: i64,
    pub per_source: BTreeMap<String, i64>,
    pub per_task: BTreeMap<TaskType, i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureDiff {
    pub buckets: BTreeMap<String, BucketDiff>,
}

impl MixtureDiff {
    pub fn is_zero(&self) -> bool {
        self.buckets.values().all(|b| {
            b.total_delta == 0
                && b.per_source.values().all(|&d| d == 0)
                && b.per_task.values().all(|&d| d == 0)
        })
    }

    /// CSV rows: bucket,dimension,key,delta.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,dimension,key,delta\n");
        for (bucket, diff) in &self.buckets {
            let _ = writeln!(out, "{bucket},total,,{}", diff.total_delta);
            for (source, delta) in &diff.per_source {
                let _ = writeln!(out, "{bucket},source,{source},{delta}");
            }
            for (task, delta) in &diff.per_task {
                let _ = writeln!(out, "{bucket},task,{task},{delta}");
            }
        }
        out
    }

    /// Aligned-column text block for terminals.
    pub fn to_aligned_text(&self) -> String {
        let mut rows: Vec<(String, String, String)> = Vec::new();
        for (bucket, diff) in &self.buckets {
            rows.push((bucket.clone(), "(total)".to_string(), format_signed(diff.total_delta)));
            for (source, delta) in &diff.per_source {
                rows.push((bucket.clone(), format!("source:{source}"), format_signed(*delta)));
            }
            for (task, delta) in &diff.per_task {
                rows.push((bucket.clone(), format!("task:{task}"), format_signed(*delta)));
            }
        }
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max("bucket".len());
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(3).max("key".len());
        let mut out = format!("{:<w0$}  {:<w1$}  delta\n", "bucket", "key");
        for (b, k, d) in rows {
            let _ = writeln!(out, "{b:<w0$}  {k:<w1$}  {d}");
        }
        out
    }
}

fn format_signed(v: i64) -> String {
    if v > 0 {
        format!("+{v}")
    } else {
        v.to_string()
    }
}

fn diff_maps<K: Ord + Clone>(
    a: &BTreeMap<K, u64>,
    b: &BTreeMap<K, u64>,
) -> BTreeMap<K, i64> {
    let keys: BTreeSet<&K> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| {
            let before = a.get(k).copied().unwrap_or(0) as i64;
            let after = b.get(k).copied().unwrap_or(0) as i64;
            (k.clone(), after - before)
        })
        .collect()
}

/// Diff two mixtures bucket by bucket. Bucket layouts must match; per-source
/// deltas are checked to sum to the bucket's total delta.
pub fn diff_mixture(
    before: &MixtureManifest,
    after: &MixtureManifest,
) -> Result<MixtureDiff, MixtureDiffError> {
    let left: Vec<String> = before.buckets.keys().cloned().collect();
    let right: Vec<String> = after.buckets.keys().cloned().collect();
    if left != right {
        return Err(MixtureDiffError::SchemaMismatch { left, right });
    }
    let mut diff = MixtureDiff::default();
    for (bucket, a) in &before.buckets {
        let b = &after.buckets[bucket];
        let bucket_diff = BucketDiff {
            total_delta: b.total as i64 - a.total as i64,
            per_source: diff_maps(&a.per_source, &b.per_source),
            per_task: diff_maps(&a.per_task, &b.per_task),
        };
        let sum: i64 = bucket_diff.per_source.values().sum();
        if sum != bucket_diff.total_delta {
            return Err(MixtureDiffError::ZeroSumViolation {
                bucket: bucket.clone(),
                sum,
                total: bucket_diff.total_delta,
            });
        }
        diff.buckets.insert(bucket.clone(), bucket_diff);
    }
    Ok(diff)
}
