//! The critique-production pipeline: sample candidate critiques for both
//! sides of each preference pair, keep only pairs whose critique scores agree
//! with the preference label (consistency filtering), then refine the
//! surviving candidates down to a handful of high-quality critiques per side,
//! either by summarizing shuffled candidate lists or by meta-scoring and
//! ranking the candidates.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{self, ClientError, CompletionBackend, CompletionRequest};
use crate::dataset::{CritiqueCandidate, CritiqueSet, PreferencePair, RefinedExample, Side};
use crate::prompts::{join_critiques, route, PromptError, TemplateStore};
use crate::util::derive_seed;

pub use crate::dataset::RefinementMode;

/// Knobs for one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Candidate critiques sampled per response (N).
    pub n_candidates: usize,
    /// Sampling temperature for candidate generation.
    pub gen_temperature: f64,
    /// Critiques kept per response after refinement (K).
    pub top_k: usize,
    pub refinement: RefinementMode,
    /// Minimum number of parsed ratings a side needs before its mean counts.
    pub min_parsed: usize,
    pub seed: u64,
    /// Token budget forwarded with every completion request.
    pub max_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_candidates: 10,
            gen_temperature: 0.9,
            top_k: 2,
            refinement: RefinementMode::Rank,
            min_parsed: 3,
            seed: 0,
            max_tokens: 512,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_candidates < 1 {
            return Err(PipelineError::BadConfig("n_candidates must be >= 1".to_string()));
        }
        if !(1..=self.n_candidates).contains(&self.top_k) {
            return Err(PipelineError::BadConfig(format!(
                "top_k must lie in 1..={}, got {}",
                self.n_candidates, self.top_k
            )));
        }
        if self.min_parsed < 1 {
            return Err(PipelineError::BadConfig("min_parsed must be >= 1".to_string()));
        }
        if !self.gen_temperature.is_finite() || self.gen_temperature < 0.0 {
            return Err(PipelineError::BadConfig(format!(
                "gen_temperature must be finite and >= 0, got {}",
                self.gen_temperature
            )));
        }
        if self.max_tokens < 1 {
            return Err(PipelineError::BadConfig("max_tokens must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    BadConfig(String),
    #[error("completion for pair {pair_id} ({side}): {source}")]
    Client { pair_id: String, side: Side, source: ClientError },
    #[error("pair {pair_id} ({side}): need {need} candidates for refinement, have {have}")]
    InsufficientCandidates { pair_id: String, side: Side, need: usize, have: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Why a pair was dropped by the consistency filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Equal critique-score means on both sides; the strict inequality fails.
    Tie,
    /// The rejected response out-scored the chosen one.
    Inverted,
    /// Too few parseable ratings on at least one side.
    InsufficientRatings,
}

/// The consistency filter's verdict on one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub reason: Option<DropReason>,
    pub mean_chosen: Option<f64>,
    pub mean_rejected: Option<f64>,
}

/// One candidate's quality judgment during ranking refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaScore {
    pub candidate_index: usize,
    /// Parsed 1–10 judge rating; unparseable judgments are scored 0 upstream.
    pub score: u8,
}

/// Tallies and per-pair failures from one pipeline run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineStats {
    pub processed: usize,
    pub kept: usize,
    pub dropped_tie: usize,
    pub dropped_inverted: usize,
    pub dropped_insufficient: usize,
    pub failures: Vec<PairFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub pair_id: String,
    pub message: String,
}

fn side_response(pair: &PreferencePair, side: Side) -> &str {
    match side {
        Side::Chosen => &pair.chosen,
        Side::Rejected => &pair.rejected,
    }
}

fn client_err(pair: &PreferencePair, side: Side) -> impl FnOnce(ClientError) -> PipelineError + '_ {
    move |source| PipelineError::Client { pair_id: pair.id.clone(), side, source }
}

/// Samples N candidate critiques for one side of a pair: a single completion
/// request for N samples at the generation temperature, each reply kept
/// verbatim with its rating parsed out (absent when the reply lacks a
/// readable `Rating: [[k]]`).
pub fn generate_candidates(
    backend: &dyn CompletionBackend,
    templates: &TemplateStore,
    pair: &PreferencePair,
    side: Side,
    cfg: &PipelineConfig,
) -> Result<CritiqueSet, PipelineError> {
    let prompt = templates.render(
        route(pair.domain),
        &[("prompt", pair.prompt.as_str()), ("response", side_response(pair, side))],
    )?;
    let response = backend
        .complete(&CompletionRequest {
            prompt,
            temperature: cfg.gen_temperature,
            n_samples: cfg.n_candidates,
            max_tokens: cfg.max_tokens,
            seed: Some(derive_seed(cfg.seed, &["gen", &pair.id, side.as_str()])),
        })
        .map_err(client_err(pair, side))?;
    let candidates = response
        .texts
        .into_iter()
        .enumerate()
        .map(|(gen_index, text)| {
            let rating = client::parse_rating(&text).ok();
            CritiqueCandidate { text, rating, gen_index }
        })
        .collect();
    Ok(CritiqueSet { pair_id: pair.id.clone(), side, candidates })
}

/// Mean of the parsed ratings in a candidate set; absent (not zero) when
/// fewer than `min_parsed` ratings parsed.
pub fn mean_score(set: &CritiqueSet, min_parsed: usize) -> Option<f64> {
    let parsed: Vec<f64> = set.candidates.iter().filter_map(|c| c.rating.map(f64::from)).collect();
    if parsed.len() < min_parsed {
        None
    } else {
        Some(parsed.iter().sum::<f64>() / parsed.len() as f64)
    }
}

/// Keeps a pair only when both sides have enough parsed ratings and the
/// chosen side's mean critique score is strictly greater than the rejected
/// side's.
pub fn instance_filter(
    set_chosen: &CritiqueSet,
    set_rejected: &CritiqueSet,
    cfg: &PipelineConfig,
) -> FilterDecision {
    let mean_chosen = mean_score(set_chosen, cfg.min_parsed);
    let mean_rejected = mean_score(set_rejected, cfg.min_parsed);
    let (keep, reason) = match (mean_chosen, mean_rejected) {
        (Some(c), Some(r)) => {
            if c > r {
                (true, None)
            } else if c == r {
                (false, Some(DropReason::Tie))
            } else {
                (false, Some(DropReason::Inverted))
            }
        }
        _ => (false, Some(DropReason::InsufficientRatings)),
    };
    FilterDecision { keep, reason, mean_chosen, mean_rejected }
}

/// Ranking refinement: ask the judge to meta-score every candidate critique,
/// then keep the texts of the K best (ties broken toward the earlier
/// candidate; unparseable judgments score 0 and so never beat a parsed one).
pub fn rank_refine(
    backend: &dyn CompletionBackend,
    templates: &TemplateStore,
    pair: &PreferencePair,
    side: Side,
    set: &CritiqueSet,
    cfg: &PipelineConfig,
) -> Result<Vec<String>, PipelineError> {
    if set.candidates.len() < cfg.top_k {
        return Err(PipelineError::InsufficientCandidates {
            pair_id: pair.id.clone(),
            side,
            need: cfg.top_k,
            have: set.candidates.len(),
        });
    }
    let response_text = side_response(pair, side);
    let mut scores = Vec::with_capacity(set.candidates.len());
    for candidate in &set.candidates {
        let prompt = templates.render(
            "rank",
            &[
                ("prompt", pair.prompt.as_str()),
                ("response", response_text),
                ("critique", candidate.text.as_str()),
            ],
        )?;
        let reply = backend
            .complete(&CompletionRequest {
                prompt,
                temperature: cfg.gen_temperature,
                n_samples: 1,
                max_tokens: cfg.max_tokens,
                seed: Some(derive_seed(
                    cfg.seed,
                    &["rank", &pair.id, side.as_str(), &candidate.gen_index.to_string()],
                )),
            })
            .map_err(client_err(pair, side))?;
        let score = client::parse_rating(&reply.texts[0]).unwrap_or(0);
        scores.push(MetaScore { candidate_index: candidate.gen_index, score });
    }
    // Highest score first; equal scores resolve toward the earlier candidate.
    scores.sort_by(|a, b| {
        b.score.cmp(&a.score).then(a.candidate_index.cmp(&b.candidate_index))
    });
    Ok(scores
        .iter()
        .take(cfg.top_k)
        .map(|meta| {
            set.candidates
                .iter()
                .find(|c| c.gen_index == meta.candidate_index)
                .expect("meta-score indexes an existing candidate")
                .text
                .clone()
        })
        .collect())
}

/// The K candidate-order permutations a summarization refinement of one side
/// will use: uniformly random, distinct whenever n! can supply K distinct
/// orderings, drawn with replacement otherwise. Fixed by (seed, pair, side),
/// so fixture builders can reproduce them exactly.
pub fn side_permutations(
    seed: u64,
    pair_id: &str,
    side: Side,
    n: usize,
    k: usize,
) -> Vec<Vec<usize>> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, &["perm", pair_id, side.as_str()]));
    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        perm
    };
    // n! >= k without overflow: multiply until the budget is met.
    let mut factorial_at_least_k = false;
    let mut acc: usize = 1;
    for i in 1..=n {
        acc = acc.saturating_mul(i);
        if acc >= k {
            factorial_at_least_k = true;
            break;
        }
    }
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(k);
    while perms.len() < k {
        let perm = draw(&mut rng);
        if factorial_at_least_k && perms.contains(&perm) {
            continue;
        }
        perms.push(perm);
    }
    perms
}

/// Summarization refinement: shuffle the candidate list K ways, render the
/// summarizer over each ordering, and return the K fresh summary texts.
pub fn summ_refine(
    backend: &dyn CompletionBackend,
    templates: &TemplateStore,
    pair: &PreferencePair,
    side: Side,
    set: &CritiqueSet,
    cfg: &PipelineConfig,
) -> Result<Vec<String>, PipelineError> {
    if set.candidates.is_empty() {
        return Err(PipelineError::InsufficientCandidates {
            pair_id: pair.id.clone(),
            side,
            need: 1,
            have: 0,
        });
    }
    let response_text = side_response(pair, side);
    let perms = side_permutations(cfg.seed, &pair.id, side, set.candidates.len(), cfg.top_k);
    let mut summaries = Vec::with_capacity(cfg.top_k);
    for (k, perm) in perms.iter().enumerate() {
        let ordered: Vec<&str> =
            perm.iter().map(|&i| set.candidates[i].text.as_str()).collect();
        let joined = join_critiques(&ordered);
        let prompt = templates.render(
            "summarize",
            &[
                ("prompt", pair.prompt.as_str()),
                ("response", response_text),
                ("critiques", joined.as_str()),
            ],
        )?;
        let reply = backend
            .complete(&CompletionRequest {
                prompt,
                temperature: cfg.gen_temperature,
                n_samples: 1,
                max_tokens: cfg.max_tokens,
                seed: Some(derive_seed(
                    cfg.seed,
                    &["summ", &pair.id, side.as_str(), &k.to_string()],
                )),
            })
            .map_err(client_err(pair, side))?;
        summaries.push(reply.texts[0].clone());
    }
    Ok(summaries)
}

/// Refinement for one side under the configured mode.
pub fn refine_side(
    backend: &dyn CompletionBackend,
    templates: &TemplateStore,
    pair: &PreferencePair,
    side: Side,
    set: &CritiqueSet,
    cfg: &PipelineConfig,
) -> Result<Vec<String>, PipelineError> {
    match cfg.refinement {
        RefinementMode::Rank => rank_refine(backend, templates, pair, side, set, cfg),
        RefinementMode::Summ => summ_refine(backend, templates, pair, side, set, cfg),
    }
}

enum PairOutcome {
    Kept(Box<RefinedExample>),
    Dropped(DropReason),
    Failed(String),
}

fn process_pair(
    backend: &dyn CompletionBackend,
    templates: &TemplateStore,
    pair: &PreferencePair,
    cfg: &PipelineConfig,
) -> Result<PairOutcome, PipelineError> {
    let set_chosen = generate_candidates(backend, templates, pair, Side::Chosen, cfg)?;
    let set_rejected = generate_candidates(backend, templates, pair, Side::Rejected, cfg)?;
    let decision = instance_filter(&set_chosen, &set_rejected, cfg);
    log::debug!(
        "pair {}: means {:?} vs {:?} -> keep={}",
        pair.id,
        decision.mean_chosen,
        decision.mean_rejected,
        decision.keep
    );
    if let Some(reason) = decision.reason {
        return Ok(PairOutcome::Dropped(reason));
    }
    let critiques_chosen =
        refine_side(backend, templates, pair, Side::Chosen, &set_chosen, cfg)?;
    let critiques_rejected =
        refine_side(backend, templates, pair, Side::Rejected, &set_rejected, cfg)?;
    Ok(PairOutcome::Kept(Box::new(RefinedExample {
        pair: pair.clone(),
        critiques_chosen,
        critiques_rejected,
        refinement: cfg.refinement,
    })))
}

/// Runs generate → filter → refine over every pair. Pairs are processed
/// concurrently up to the backend's in-flight budget, but results are
/// aggregated strictly in input order, so a scripted backend and fixed seed
/// give byte-identical output. Per-pair failures are recorded in the stats
/// and never abort the run.
pub fn run_pipeline(
    backend: &dyn CompletionBackend,
    templates: &TemplateStore,
    pairs: &[PreferencePair],
    cfg: &PipelineConfig,
) -> Result<(Vec<RefinedExample>, PipelineStats), PipelineError> {
    cfg.validate()?;
    let n = pairs.len();
    let slots: Mutex<Vec<Option<PairOutcome>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = backend.max_inflight().clamp(1, n.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= n {
                    break;
                }
                let pair = &pairs[idx];
                let outcome = match process_pair(backend, templates, pair, cfg) {
                    Ok(outcome) => outcome,
                    Err(err) => PairOutcome::Failed(err.to_string()),
                };
                slots.lock().expect("pipeline slots")[idx] = Some(outcome);
            });
        }
    });

    let mut refined = Vec::new();
    let mut stats = PipelineStats::default();
    for (idx, slot) in slots.into_inner().expect("pipeline slots").into_iter().enumerate() {
        stats.processed += 1;
        match slot.expect("every pair processed") {
            PairOutcome::Kept(example) => {
                stats.kept += 1;
                refined.push(*example);
            }
            PairOutcome::Dropped(DropReason::Tie) => stats.dropped_tie += 1,
            PairOutcome::Dropped(DropReason::Inverted) => stats.dropped_inverted += 1,
            PairOutcome::Dropped(DropReason::InsufficientRatings) => {
                stats.dropped_insufficient += 1
            }
            PairOutcome::Failed(message) => {
                log::warn!("pair {} failed: {message}", pairs[idx].id);
                stats.failures.push(PairFailure { pair_id: pairs[idx].id.clone(), message });
            }
        }
    }
    Ok((refined, stats))
}
