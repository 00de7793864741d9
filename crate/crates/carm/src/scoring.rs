//! Critique-then-score inference with inference-time scaling.
//!
//! A response is scored by first sampling a critique of it from the language
//! head and then reading the reward head conditioned on that critique.
//! Averaging the reward over `m` independently seeded critiques trades
//! compute for a lower-variance estimate. Critiques may be generated
//! concurrently, but the mean is always reduced in fixed index order, so a
//! given request with a given seed produces a bitwise-identical result.
//!
//! Rewards are raw reals; [`ScoreResult::reward_display`] additionally
//! carries the logistic squashing of the mean into `[0, 1]` for
//! presentation. Comparisons report ties as ties; no tie is ever silently
//! broken here — downstream consumers decide their own tie policy.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toymodel::{ToyError, ToyModel};
use crate::util::{derive_seed, sha256_hex};

/// Default number of critiques per scoring request.
pub const DEFAULT_M: usize = 1;

/// Default sampling temperature for critique generation at scoring time.
pub const DEFAULT_TEMPERATURE: f64 = 0.95;

/// Upper bound on concurrently sampled critiques within one request.
pub const SCORING_MAX_INFLIGHT: usize = 8;

fn default_m() -> usize {
    DEFAULT_M
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

/// A request to score one response to a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub response: String,
    /// Number of critiques to sample and average over; must be >= 1.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Sampling temperature for critique generation.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Root seed for this request; critique `i` uses a sub-seed derived
    /// from it, so the whole result is a pure function of the request.
    #[serde(default)]
    pub seed: u64,
}

impl ScoreRequest {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            response: response.into(),
            m: DEFAULT_M,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

/// The outcome of scoring one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    /// Arithmetic mean of `per_critique_rewards`, reduced in index order.
    pub reward: f64,
    /// Logistic squashing of `reward` into `[0, 1]` for display.
    pub reward_display: f64,
    /// The sampled critiques, in sub-seed index order.
    pub critiques: Vec<String>,
    /// The reward read for each critique, aligned with `critiques`.
    pub per_critique_rewards: Vec<f64>,
}

/// A request to compare two responses to the same prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRequest {
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Which side of a comparison won.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    A,
    B,
    Tie,
}

impl Verdict {
    /// The verdict with the two sides swapped.
    pub fn mirrored(self) -> Self {
        match self {
            Verdict::A => Verdict::B,
            Verdict::B => Verdict::A,
            Verdict::Tie => Verdict::Tie,
        }
    }
}

/// The outcome of comparing two responses: the verdict plus both full
/// scoring results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResult {
    pub verdict: Verdict,
    pub score_a: ScoreResult,
    pub score_b: ScoreResult,
}

/// Errors from scoring operations.
#[derive(Debug, Error)]
pub enum ScoringError {
    /// The request itself is invalid; `field` names the offending field.
    #[error("invalid field `{field}`: {message}")]
    Validation {
        field: &'static str,
        message: String,
    },
    /// The underlying model failed during sampling or reward reading.
    #[error("model error: {0}")]
    Model(#[from] ToyError),
    /// A reward came back non-finite, which means the model parameters are
    /// unusable for scoring.
    #[error("non-finite reward {value} for critique index {index}")]
    NonFiniteReward { index: usize, value: f64 },
}

fn require_nonempty(field: &'static str, text: &str) -> Result<(), ScoringError> {
    if text.split_whitespace().next().is_none() {
        return Err(ScoringError::Validation {
            field,
            message: "must be non-empty".to_string(),
        });
    }
    Ok(())
}

fn require_temperature(temperature: f64) -> Result<(), ScoringError> {
    if !temperature.is_finite() || temperature < 0.0 {
        return Err(ScoringError::Validation {
            field: "temperature",
            message: format!("must be finite and >= 0, got {temperature}"),
        });
    }
    Ok(())
}

fn require_m(m: usize) -> Result<(), ScoringError> {
    if m == 0 {
        return Err(ScoringError::Validation {
            field: "m",
            message: "must be >= 1".to_string(),
        });
    }
    Ok(())
}

/// Validates a [`ScoreRequest`] without running it.
pub fn validate_score_request(req: &ScoreRequest) -> Result<(), ScoringError> {
    require_m(req.m)?;
    require_temperature(req.temperature)?;
    require_nonempty("response", &req.response)
}

/// Validates a [`CompareRequest`] without running it.
pub fn validate_compare_request(req: &CompareRequest) -> Result<(), ScoringError> {
    require_m(req.m)?;
    require_temperature(req.temperature)?;
    require_nonempty("response_a", &req.response_a)?;
    require_nonempty("response_b", &req.response_b)
}

/// Sub-seed for critique `index` within a request seeded with `base`.
pub fn critique_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, &["score", &index.to_string()])
}

/// Seed for one side of a comparison. It is derived from the root seed and
/// the response text itself, so swapping the two responses swaps the seeds
/// and `compare(a, b)` mirrors `compare(b, a)` exactly.
pub fn side_seed(root: u64, response: &str) -> u64 {
    derive_seed(root, &[&sha256_hex(response)])
}

/// Left-to-right sum divided by the count. The fixed reduction order makes
/// the mean a pure function of the list, bit for bit.
pub fn mean_fixed_order(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    sum / values.len() as f64
}

/// Logistic squashing of a raw reward into `[0, 1]`.
pub fn squash(reward: f64) -> f64 {
    1.0 / (1.0 + (-reward).exp())
}

/// Verdict for a pair of mean rewards. Exact equality is a tie.
pub fn verdict_for(reward_a: f64, reward_b: f64) -> Verdict {
    if reward_a > reward_b {
        Verdict::A
    } else if reward_b > reward_a {
        Verdict::B
    } else {
        Verdict::Tie
    }
}

/// Samples one critique of `response` and reads the reward conditioned on
/// it. At temperature 0 the critique is the greedy decode and the seed is
/// irrelevant; otherwise the same seed always yields the same pair.
pub fn score_once(
    model: &ToyModel,
    prompt: &str,
    response: &str,
    temperature: f64,
    seed: u64,
) -> Result<(String, f64), ScoringError> {
    require_temperature(temperature)?;
    require_nonempty("response", response)?;
    let critique = model.sample_critique(prompt, response, temperature, seed)?;
    let reward = model.reward_for_text(prompt, response, &critique)?;
    if !reward.is_finite() {
        return Err(ScoringError::NonFiniteReward {
            index: 0,
            value: reward,
        });
    }
    Ok((critique, reward))
}

/// Scores a response with `m` independently seeded critiques and returns
/// the mean reward. Critiques are sampled concurrently up to
/// [`SCORING_MAX_INFLIGHT`] at a time, then reduced in index order.
pub fn score_scaled(model: &ToyModel, req: &ScoreRequest) -> Result<ScoreResult, ScoringError> {
    validate_score_request(req)?;
    let m = req.m;
    type Slot = Option<Result<(String, f64), ScoringError>>;
    let slots: Mutex<Vec<Slot>> = Mutex::new((0..m).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = SCORING_MAX_INFLIGHT.min(m).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= m {
                    break;
                }
                let outcome = score_once(
                    model,
                    &req.prompt,
                    &req.response,
                    req.temperature,
                    critique_seed(req.seed, i),
                );
                slots.lock().expect("scoring slots")[i] = Some(outcome);
            });
        }
    });
    let outcomes = slots.into_inner().expect("scoring slots");
    let mut critiques = Vec::with_capacity(m);
    let mut per_critique_rewards = Vec::with_capacity(m);
    for (index, slot) in outcomes.into_iter().enumerate() {
        let (critique, reward) = slot
            .expect("every critique index is claimed by exactly one worker")
            .map_err(|err| match err {
                ScoringError::NonFiniteReward { value, .. } => {
                    ScoringError::NonFiniteReward { index, value }
                }
                other => other,
            })?;
        critiques.push(critique);
        per_critique_rewards.push(reward);
    }
    let reward = mean_fixed_order(&per_critique_rewards);
    Ok(ScoreResult {
        reward,
        reward_display: squash(reward),
        critiques,
        per_critique_rewards,
    })
}

/// Scores both responses and reports which side has the higher mean reward.
/// Each side's seed depends only on the root seed and that side's text, so
/// the comparison is antisymmetric under swapping the responses.
pub fn compare(model: &ToyModel, req: &CompareRequest) -> Result<CompareResult, ScoringError> {
    validate_compare_request(req)?;
    let side = |response: &str| -> Result<ScoreResult, ScoringError> {
        score_scaled(
            model,
            &ScoreRequest {
                prompt: req.prompt.clone(),
                response: response.to_string(),
                m: req.m,
                temperature: req.temperature,
                seed: side_seed(req.seed, response),
            },
        )
    };
    let score_a = side(&req.response_a)?;
    let score_b = side(&req.response_b)?;
    let verdict = verdict_for(score_a.reward, score_b.reward);
    Ok(CompareResult {
        verdict,
        score_a,
        score_b,
    })
}
