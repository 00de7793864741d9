//! A deterministic scripted judge for fully offline runs.
//!
//! Given preference pairs and their hidden gold labels, the judge decides —
//! reproducibly, from a seed — what a critique model would say at every
//! step of the pipeline, and pre-renders every prompt the pipeline will
//! issue into a completion fixture. Running the pipeline against a
//! scripted backend loaded from that fixture is then byte-deterministic
//! and needs no network.
//!
//! The judge is imperfect on purpose: each fidelity knob is the
//! probability that a given output agrees with the hidden gold label, and
//! a small fraction of candidate critiques omit their rating line, so the
//! downstream filter and refinement stages see realistic noise.
//!
//! The fixture covers both refinement modes (per-candidate meta-ratings
//! and permuted-summary completions), so one fixture serves a ranking run
//! and a summarization run; each run should consume its own scripted
//! backend built from the fixture, because backends drain their entries.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::client::Fixture;
use crate::dataset::{GoldLabel, PreferencePair, Side};
use crate::pipeline::{side_permutations, PipelineConfig};
use crate::prompts::{join_critiques, route, PromptError, TemplateStore};
use crate::util::derive_seed;

/// Trait words used in positive critiques; index-aligned with the negative
/// pool so the two classes are lexically disjoint.
pub const POSITIVE_TRAITS: [&str; 5] =
    ["accurate", "helpful", "clear", "thorough", "consistent"];

/// Trait words used in negative critiques.
pub const NEGATIVE_TRAITS: [&str; 5] =
    ["inaccurate", "unhelpful", "vague", "incomplete", "inconsistent"];

/// Behavior knobs for the scripted judge. Every `*_fidelity` value is the
/// probability that the corresponding output agrees with the gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeProfile {
    pub seed: u64,
    /// Chance a candidate critique's polarity matches the response's gold.
    pub candidate_fidelity: f64,
    /// Chance a meta-rating scores a candidate by its true usefulness.
    pub meta_fidelity: f64,
    /// Chance a summary critique's polarity matches the response's gold.
    pub summary_fidelity: f64,
    /// Chance a candidate critique omits its rating line entirely.
    pub missing_rating_rate: f64,
}

impl Default for JudgeProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            candidate_fidelity: 0.85,
            meta_fidelity: 0.9,
            summary_fidelity: 0.95,
            missing_rating_rate: 0.05,
        }
    }
}

impl JudgeProfile {
    pub fn validate(&self) -> Result<(), SynthJudgeError> {
        for (name, value) in [
            ("candidate_fidelity", self.candidate_fidelity),
            ("meta_fidelity", self.meta_fidelity),
            ("summary_fidelity", self.summary_fidelity),
            ("missing_rating_rate", self.missing_rating_rate),
        ] {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(SynthJudgeError::BadProfile(format!(
                    "{name} must be in [0, 1], got {value}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SynthJudgeError {
    #[error("no gold label for pair {0}")]
    MissingGold(String),
    #[error("invalid judge profile: {0}")]
    BadProfile(String),
    #[error("invalid pipeline config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

fn rng_for(seed: u64, stage: &str, pair_id: &str, side: Side) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stage, pair_id, side.as_str()]))
}

fn pick_two_traits(rng: &mut ChaCha8Rng, pool: &[&'static str]) -> (&'static str, &'static str) {
    let a = rng.random_range(0..pool.len());
    let b = (a + 1 + rng.random_range(0..pool.len() - 1)) % pool.len();
    (pool[a], pool[b])
}

/// One candidate critique: two trait words, a verdict sentence, and —
/// unless the judge "forgot" — a trailing rating line with a 7–9 rating
/// for positive critiques or 2–4 for negative ones.
fn candidate_text(rng: &mut ChaCha8Rng, positive: bool, missing_rating: bool) -> String {
    let pool = if positive { &POSITIVE_TRAITS } else { &NEGATIVE_TRAITS };
    let (a, b) = pick_two_traits(rng, pool);
    let verdict = if positive { "correct" } else { "not correct" };
    let body = format!("The response is {a} and {b} overall. The answer is {verdict}.");
    let rating = if positive {
        rng.random_range(7..=9)
    } else {
        rng.random_range(2..=4)
    };
    if missing_rating {
        body
    } else {
        format!("{body} Rating: [[{rating}]]")
    }
}

/// One meta-judgment of a candidate critique, always parseable: 8–10 when
/// the candidate is considered useful, 1–3 otherwise.
fn meta_text(rng: &mut ChaCha8Rng, useful: bool) -> String {
    let (word, score) = if useful {
        ("apt", rng.random_range(8..=10))
    } else {
        ("misguided", rng.random_range(1..=3))
    };
    format!("The critique is {word}. Rating: [[{score}]]")
}

/// One summary critique: consolidated trait words plus a verdict sentence
/// that the verdict parser can read.
fn summary_text(rng: &mut ChaCha8Rng, positive: bool) -> String {
    let pool = if positive { &POSITIVE_TRAITS } else { &NEGATIVE_TRAITS };
    let (a, b) = pick_two_traits(rng, pool);
    let verdict = if positive { "correct" } else { "not correct" };
    format!("Overall, the response is {a} and {b}. The answer is {verdict}.")
}

/// Pre-renders every prompt the pipeline will issue for `pairs` under
/// `cfg` and scripts the judge's reply to each, covering candidate
/// generation, per-candidate meta-ratings, and permuted-summary requests.
pub fn build_fixture(
    pairs: &[PreferencePair],
    gold: &[GoldLabel],
    cfg: &PipelineConfig,
    templates: &TemplateStore,
    profile: &JudgeProfile,
) -> Result<Fixture, SynthJudgeError> {
    profile.validate()?;
    cfg.validate()
        .map_err(|e| SynthJudgeError::BadConfig(e.to_string()))?;
    let by_id: BTreeMap<&str, &GoldLabel> =
        gold.iter().map(|label| (label.id.as_str(), label)).collect();
    let mut fixture = Fixture::new();
    for pair in pairs {
        let label = by_id
            .get(pair.id.as_str())
            .ok_or_else(|| SynthJudgeError::MissingGold(pair.id.clone()))?;
        for side in [Side::Chosen, Side::Rejected] {
            let marker = match side {
                Side::Chosen => label.chosen_marker,
                Side::Rejected => label.rejected_marker,
            };
            script_side(&mut fixture, pair, side, marker, cfg, templates, profile)?;
        }
    }
    Ok(fixture)
}

fn script_side(
    fixture: &mut Fixture,
    pair: &PreferencePair,
    side: Side,
    marker: bool,
    cfg: &PipelineConfig,
    templates: &TemplateStore,
    profile: &JudgeProfile,
) -> Result<(), SynthJudgeError> {
    let response_text = match side {
        Side::Chosen => pair.chosen.as_str(),
        Side::Rejected => pair.rejected.as_str(),
    };
    let base_bindings = [
        ("prompt", pair.prompt.as_str()),
        ("response", response_text),
    ];

    // Candidate generation: one prompt, `n_candidates` scripted replies.
    let gen_prompt = templates.render(route(pair.domain), &base_bindings)?;
    let mut cand_rng = rng_for(profile.seed, "judge-cand", &pair.id, side);
    let mut candidates: Vec<(String, bool)> = Vec::with_capacity(cfg.n_candidates);
    for _ in 0..cfg.n_candidates {
        let positive = if cand_rng.random_bool(profile.candidate_fidelity) {
            marker
        } else {
            !marker
        };
        let missing = cand_rng.random_bool(profile.missing_rating_rate);
        let text = candidate_text(&mut cand_rng, positive, missing);
        fixture.push_response(&gen_prompt, text.clone());
        candidates.push((text, positive));
    }

    // Ranking mode: one meta-rating reply per candidate, in order.
    let mut meta_rng = rng_for(profile.seed, "judge-meta", &pair.id, side);
    for (text, positive) in &candidates {
        let rank_prompt = templates.render(
            "rank",
            &[
                ("prompt", pair.prompt.as_str()),
                ("response", response_text),
                ("critique", text.as_str()),
            ],
        )?;
        let truly_useful = *positive == marker;
        let useful = if meta_rng.random_bool(profile.meta_fidelity) {
            truly_useful
        } else {
            !truly_useful
        };
        fixture.push_response(&rank_prompt, meta_text(&mut meta_rng, useful));
    }

    // Summarization mode: one reply per permuted-candidate prompt, using
    // the same permutation schedule the pipeline derives.
    let perms = side_permutations(cfg.seed, &pair.id, side, cfg.n_candidates, cfg.top_k);
    let mut summ_rng = rng_for(profile.seed, "judge-summ", &pair.id, side);
    for perm in &perms {
        let ordered: Vec<&str> = perm.iter().map(|&i| candidates[i].0.as_str()).collect();
        let joined = join_critiques(&ordered);
        let summ_prompt = templates.render(
            "summarize",
            &[
                ("prompt", pair.prompt.as_str()),
                ("response", response_text),
                ("critiques", joined.as_str()),
            ],
        )?;
        let positive = if summ_rng.random_bool(profile.summary_fidelity) {
            marker
        } else {
            !marker
        };
        fixture.push_response(&summ_prompt, summary_text(&mut summ_rng, positive));
    }
    Ok(())
}
