//! Dataset curation engine for multimodal instruction-tuning corpora.
//!
//! The crate is organized around two phases of a data-flywheel iteration:
//!
//! * building the training set — six ordered filtering stages (duplicate
//!   removal, image-text mismatch triage, text-dominant conversion, source
//!   auditing, rule filters, model-based quality filtering) plus answer
//!   improvement (prompt isolation, verbose rewriting, chain-of-thought
//!   generation with rejection sampling), all with per-sample lineage; and
//! * reacting to a trained model — benchmark aggregation and regression
//!   diagnosis, incremental-validation mix planning, and redundant-data
//!   pruning plans.
//!
//! Every stage with randomness takes an explicit seed and replays exactly.

pub mod catabolism;
pub mod corpus;
pub mod dedup;
pub mod filters;
pub mod fingerprint;
pub mod improve;
pub mod judge;
pub mod pipeline;
