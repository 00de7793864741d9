//! Critique-augmented reward modeling at desk scale.
//!
//! This crate implements a complete, deterministic pipeline for training and
//! serving reward models that read a critique of a response before scoring it:
//!
//! 1. **Candidate generation** — for every preference pair, a judge prompt asks a
//!    completion backend for N candidate critiques of each response, each ending
//!    in a `Rating: [[k]]` verdict on a 1–10 scale.
//! 2. **Consistency filtering** — a pair is kept only when the mean critique
//!    rating of the chosen response strictly exceeds that of the rejected one.
//! 3. **Refinement** — the N candidates per side are distilled into K critiques,
//!    either by summarizing shuffled candidate lists (`summ`) or by meta-scoring
//!    each candidate and keeping the top K (`rank`).
//! 4. **Joint training** — a small differentiable model with a shared embedding
//!    table, a bigram language-model head, and a linear reward head is trained on
//!    a preference loss over critique-conditioned rewards plus a critique
//!    log-likelihood loss, blended by a per-step weight that starts at 1 and
//!    decays linearly through the final epoch.
//! 5. **Scoring** — at inference the model samples its own critiques and scores
//!    the response conditioned on them; sampling m critiques and averaging the
//!    rewards trades compute for variance.
//!
//! # Architecture
//!
//! - [`dataset`]: preference-pair records, line-delimited file I/O, prompt
//!   decontamination, and a synthetic corpus generator with planted quality
//!   markers.
//! - [`client`]: completion backend trait with a scripted (fixture-replay)
//!   implementation and an HTTP implementation with retries, backoff, and an
//!   in-flight cap; rating extraction from critique text.
//! - [`prompts`]: versioned prompt templates with `{placeholder}` rendering and
//!   per-domain judge routing.
//! - [`pipeline`]: generation → filtering → refinement orchestration with
//!   per-pair error isolation and drop-reason accounting.
//! - [`objective`]: preference loss, critique negative log-likelihood, the
//!   per-step weight schedule, and their combination.
//! - [`toymodel`]: the toy model itself — tokenizer, forward passes, exact
//!   analytic gradients, the training loop, and versioned checkpoints.
//! - [`scoring`]: critique-conditioned scoring, inference-time scaling, and
//!   pairwise comparison.
//! - [`service`]: an HTTP facade over [`scoring`].
//! - [`eval`]: pairwise accuracy, critique verdict parsing and F1, and
//!   byte-stable report emission.
//! - [`synthjudge`]: a deterministic rule-based judge that fills completion
//!   fixtures so the whole pipeline runs offline.
//! - [`demo`]: one-command end-to-end run on synthetic data.
//! - [`config`]: layered run configuration (flags > environment > file >
//!   defaults).

pub mod client;
pub mod config;
pub mod dataset;
pub mod demo;
pub mod eval;
pub mod objective;
pub mod pipeline;
pub mod prompts;
pub mod scoring;
pub mod service;
pub mod synthjudge;
pub mod toymodel;
pub mod util;

pub use dataset::{CritiqueCandidate, CritiqueSet, Domain, PreferencePair, RefinedExample, Side};
pub use objective::ScheduleParams;
pub use pipeline::{PipelineConfig, RefinementMode};
pub use toymodel::{ToyConfig, ToyModel};
