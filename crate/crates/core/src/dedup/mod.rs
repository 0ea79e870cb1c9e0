//! Duplicate-sample removal: perceptual image hashing, prompt-stripped text
//! normalization, clustering, and seeded one-survivor-per-group selection.

mod phash;

pub use phash::{phash_image, phash_path, phash_rgb8, PHash64, PHashError};

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LineageStamp, Sample, VerdictKind};
use crate::fingerprint::{derive_seed, fnv1a_64};

pub const STAGE_NAME: &str = "dedup";

#[derive(Debug, Error)]
pub enum DedupError {
    #[error(transparent)]
    PHash(#[from] PHashError),
}

/// Configuration for one dedup pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DedupConfig {
    /// Maximum Hamming distance at which two image hashes count as the same
    /// image. 0 means exact perceptual-hash clustering.
    #[serde(default)]
    pub threshold: u32,
    /// Prompt boilerplate stripped from question text before keying.
    #[serde(default)]
    pub prompt_templates: Vec<String>,
    /// Directory image uris are resolved against; defaults to the cwd.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig { threshold: 0, prompt_templates: Vec::new(), image_root: None }
    }
}

/// Identity under which two samples are duplicates: the multiset of image
/// hashes plus a hash of the prompt-stripped, normalized question text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DedupKey {
    pub image_component: Vec<u64>,
    pub text_component: u64,
}

impl DedupKey {
    pub fn new(mut image_hashes: Vec<u64>, normalized_question: &str) -> Self {
        image_hashes.sort_unstable();
        DedupKey {
            image_component: image_hashes,
            text_component: fnv1a_64(normalized_question.as_bytes()),
        }
    }
}

/// Strip prompt boilerplate and normalize question text for duplicate keying:
/// case-folded, whitespace runs collapsed, no template occurrences, idempotent.
pub fn normalize_question(text: &str, prompt_templates: &[String]) -> String {
    let templates: Vec<String> = prompt_templates
        .iter()
        .map(|t| collapse_whitespace(&t.to_lowercase()))
        .filter(|t| !t.is_empty())
        .collect();
    let mut current = text.to_string();
    loop {
        let mut next = collapse_whitespace(&current.to_lowercase());
        for template in &templates {
            while let Some(pos) = next.find(template.as_str()) {
                next.replace_range(pos..pos + template.len(), "");
            }
        }
        let next = collapse_whitespace(&next);
        if next == current {
            return next;
        }
        current = next;
    }
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Outcome counts of one dedup pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub input_total: u64,
    pub kept: u64,
    pub removed: u64,
    pub quarantined: u64,
    /// Duplicate groups of size >= 2.
    pub groups: u64,
    pub max_group_size: u64,
    pub removed_fraction: f64,
}

impl DedupReport {
    /// Flat key=value rendering for logs and shell pipelines.
    pub fn to_kv_block(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "input_total={}", self.input_total);
        let _ = writeln!(out, "kept={}", self.kept);
        let _ = writeln!(out, "removed={}", self.removed);
        let _ = writeln!(out, "quarantined={}", self.quarantined);
        let _ = writeln!(out, "groups={}", self.groups);
        let _ = writeln!(out, "max_group_size={}", self.max_group_size);
        let _ = writeln!(out, "removed_fraction={}", self.removed_fraction);
        out
    }
}

/// Result streams of one dedup pass. `kept + dropped + quarantined` always
/// partitions the input.
#[derive(Debug)]
pub struct DedupOutcome {
    pub kept: Vec<Sample>,
    pub dropped: Vec<Sample>,
    pub quarantined: Vec<Sample>,
    pub report: DedupReport,
}

/// Cluster duplicate samples and keep one seeded-random survivor per group.
///
/// Image hashes already present on an [`crate::corpus::ImageRef`] are trusted;
/// missing ones are computed from the referenced file. Samples whose images
/// cannot be read or decoded are quarantined, not dropped. Survivors get
/// their hashes filled in, which makes a second pass over the output both
/// cheap and removal-free.
pub fn cluster_and_select(
    samples: Vec<Sample>,
    config: &DedupConfig,
    seed: u64,
    stamp: &LineageStamp,
) -> DedupOutcome {
    let input_total = samples.len() as u64;

    // Phase 1: hash every distinct unhashed uri in parallel.
    let mut pending: Vec<&str> = samples
        .iter()
        .flat_map(|s| s.images.iter())
        .filter(|img| img.phash.is_none())
        .map(|img| img.uri.as_str())
        .collect();
    pending.sort_unstable();
    pending.dedup();
    let hashed: HashMap<String, Result<PHash64, String>> = pending
        .par_iter()
        .map(|uri| {
            let path = match &config.image_root {
                Some(root) => root.join(uri),
                None => Path::new(uri).to_path_buf(),
            };
            let result = phash_path(&path).map_err(|e| e.to_string());
            (uri.to_string(), result)
        })
        .collect();

    // Phase 2: deterministic merge. Key every sample, quarantining the
    // unreadable ones, then group by key.
    let mut quarantined = Vec::new();
    let mut keyed: Vec<(DedupKey, Sample)> = Vec::with_capacity(samples.len());
    'sample: for mut sample in samples {
        let mut image_hashes = Vec::with_capacity(sample.images.len());
        for img in &mut sample.images {
            let hash = match img.phash {
                Some(h) => h,
                None => match &hashed[img.uri.as_str()] {
                    Ok(h) => h.0,
                    Err(msg) => {
                        sample.push_lineage(stamp.event(
                            STAGE_NAME,
                            VerdictKind::Flag,
                            format!("quarantined:{msg}"),
                        ));
                        quarantined.push(sample);
                        continue 'sample;
                    }
                },
            };
            img.phash = Some(hash);
            image_hashes.push(hash);
        }
        let normalized = normalize_question(&sample.question_text(), &config.prompt_templates);
        keyed.push((DedupKey::new(image_hashes, &normalized), sample));
    }

    let groups = group_samples(keyed, config.threshold);

    // Phase 3: per-group survivor draw, seeded by the group's smallest id so
    // the draw is independent of group enumeration order.
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut group_count = 0u64;
    let mut max_group_size = 0u64;
    for mut members in groups {
        members.sort_by(|a, b| a.id.cmp(&b.id));
        let size = members.len() as u64;
        max_group_size = max_group_size.max(size);
        if size >= 2 {
            group_count += 1;
        }
        let survivor_idx = if members.len() == 1 {
            0
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &members[0].id));
            rng.random_range(0..members.len())
        };
        for (i, mut member) in members.into_iter().enumerate() {
            if i == survivor_idx {
                let reason = if size == 1 {
                    "unique".to_string()
                } else {
                    format!("group_survivor:size={size}")
                };
                member.push_lineage(stamp.event(STAGE_NAME, VerdictKind::Keep, reason));
                kept.push(member);
            } else {
                member.push_lineage(stamp.event(STAGE_NAME, VerdictKind::Drop, "duplicate"));
                dropped.push(member);
            }
        }
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    dropped.sort_by(|a, b| a.id.cmp(&b.id));
    quarantined.sort_by(|a, b| a.id.cmp(&b.id));

    let removed = dropped.len() as u64;
    let report = DedupReport {
        input_total,
        kept: kept.len() as u64,
        removed,
        quarantined: quarantined.len() as u64,
        groups: group_count,
        max_group_size,
        removed_fraction: if input_total == 0 { 0.0 } else { removed as f64 / input_total as f64 },
    };
    DedupOutcome { kept, dropped, quarantined, report }
}

/// Group keyed samples. Exact mode buckets on the key; near mode additionally
/// unions groups whose image hashes sit within the Hamming threshold.
fn group_samples(keyed: Vec<(DedupKey, Sample)>, threshold: u32) -> Vec<Vec<Sample>> {
    if threshold == 0 {
        let mut buckets: BTreeMap<DedupKey, Vec<Sample>> = BTreeMap::new();
        for (key, sample) in keyed {
            buckets.entry(key).or_default().push(sample);
        }
        return buckets.into_values().collect();
    }

    // Near-duplicate mode: union-find inside each text bucket.
    let mut by_text: BTreeMap<u64, Vec<(Vec<u64>, Sample)>> = BTreeMap::new();
    for (key, sample) in keyed {
        by_text.entry(key.text_component).or_default().push((key.image_component, sample));
    }
    let mut groups = Vec::new();
    for (_, members) in by_text {
        let n = members.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if within_threshold(&members[i].0, &members[j].0, threshold) {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }
        let mut clusters: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
        for (i, (_, sample)) in members.into_iter().enumerate() {
            let root = find(&mut parent, i);
            clusters.entry(root).or_default().push(sample);
        }
        groups.extend(clusters.into_values());
    }
    groups
}

/// Two image components are within threshold when they have the same arity
/// and every aligned pair of sorted hashes is within `d` bits.
fn within_threshold(a: &[u64], b: &[u64], d: u32) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|(&x, &y)| PHash64(x).hamming(PHash64(y)) <= d)
}
