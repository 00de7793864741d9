//! A desk-scale differentiable model with two heads over one shared embedding
//! table: a bigram language-modeling head that scores critique text, and a
//! mean-pool linear reward head that scores (prompt, response, critique)
//! triples. Because both heads read the same embeddings, the critique/reward
//! weight schedule produces a real trade-off that training metrics can
//! observe.
//!
//! Gradients are hand-derived (softmax NLL through the LM head and the
//! embeddings; pairwise preference loss through the reward head and the
//! embeddings) and verified against central finite differences by
//! [`finite_difference_gradient`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::RefinedExample;
use crate::objective::{
    self, CritiqueLogProbs, ObjectiveError, RewardPair, ScheduleParams,
};
use crate::util::{derive_seed, sha256_hex};

/// Sequence-start token id.
pub const BOS: usize = 0;
/// Section separator token id ([prompt] SEP [response] SEP [critique]).
pub const SEP: usize = 1;
/// Reward-readout token id: the position whose representation feeds the
/// reward head.
pub const RWD: usize = 2;
/// Out-of-vocabulary token id.
pub const UNK: usize = 3;
/// Number of reserved token ids at the bottom of every vocabulary.
pub const RESERVED_TOKENS: usize = 4;
/// Display names of the reserved tokens, in id order.
pub const RESERVED_NAMES: [&str; RESERVED_TOKENS] = ["[BOS]", "[SEP]", "[RWD]", "[UNK]"];

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("reward input is empty: prompt, response, and critique have no tokens")]
    EmptySpan,
    #[error("example {pair_id} has no {side} critiques")]
    MissingCritique { pair_id: String, side: &'static str },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at optimizer step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// Whitespace vocabulary: reserved ids first, then corpus words in
/// first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from training text in iteration order. Words seen
    /// earlier get smaller ids, so the result is deterministic for a fixed
    /// corpus order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index: BTreeMap<String, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for text in texts {
            for word in text.split_whitespace() {
                if !index.contains_key(word) {
                    index.insert(word.to_string(), words.len());
                    words.push(word.to_string());
                }
            }
        }
        Vocab { words, index }
    }

    /// Rebuilds a vocabulary from a stored word list, checking the reserved
    /// prefix and uniqueness.
    pub fn from_words(words: Vec<String>) -> Result<Self, ToyError> {
        if words.len() < RESERVED_TOKENS {
            return Err(ToyError::BadConfig(format!(
                "word list has {} entries; at least {RESERVED_TOKENS} required",
                words.len()
            )));
        }
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            if words[i] != *name {
                return Err(ToyError::BadConfig(format!(
                    "word {i} must be the reserved token {name:?}, found {:?}",
                    words[i]
                )));
            }
        }
        let mut index = BTreeMap::new();
        for (i, word) in words.iter().enumerate() {
            if index.insert(word.clone(), i).is_some() {
                return Err(ToyError::BadConfig(format!("duplicate word {word:?} in word list")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved prefix is always present
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenization; unknown words map to the [UNK] id.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| *self.index.get(w).unwrap_or(&UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.words.get(id).map(String::as_str).unwrap_or("[?]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive-moment update: first moment m ← β₁m + (1−β₁)g, second moment
    /// v ← β₂v + (1−β₂)g², bias-corrected m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ),
    /// step θ ← θ − lr·m̂/(√v̂ + ε), with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
}

/// How the critique weight λ evolves over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSchedule {
    /// Hold λ = 1 through the first epochs, then decay linearly to 1 − β in
    /// the final epoch.
    Dynamic,
    /// Fixed λ for every step (0.0 trains the reward head only; useful as a
    /// critique-free baseline).
    Constant(f64),
    /// The dynamic schedule played backwards (reward first, critiques last);
    /// an ablation of the ordering.
    Reverse,
}

/// Model and trainer hyperparameters.
///
/// [`ToyConfig::default`] carries the documented reference values used for
/// full-scale training (learning rate 2e-6, batch 64, adaptive-moment
/// optimizer); [`ToyConfig::toy_profile`] rescales them for the desk-scale
/// model, where such a tiny learning rate would never move the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Total vocabulary size, including the reserved ids.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Number of passes over the training set (K).
    pub epochs: u64,
    pub batch_size: usize,
    /// Final-epoch decay depth of the dynamic schedule: λ ends at 1 − β.
    pub beta: f64,
    pub optimizer: OptimizerKind,
    /// Decoupled weight decay applied to every parameter at each step.
    pub weight_decay: f64,
    pub schedule: WeightSchedule,
    /// Length cap when the model samples critiques of its own.
    pub sample_max_tokens: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab_size: RESERVED_TOKENS,
            embed_dim: 16,
            learning_rate: 2e-6,
            seed: 0,
            epochs: 2,
            batch_size: 64,
            beta: 0.9,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.1,
            schedule: WeightSchedule::Dynamic,
            sample_max_tokens: 16,
        }
    }
}

impl ToyConfig {
    /// Hyperparameters rescaled for the desk-scale model: a learning rate the
    /// tiny parameter count can feel, a small batch so the final epoch's
    /// blended phase sees enough optimizer steps to train the reward head,
    /// and a weight decay light enough not to erase those few steps.
    /// Everything else matches the reference profile. Values picked by the
    /// `pilot_sweep` grid (run it with `--ignored --nocapture`).
    pub fn toy_profile(seed: u64) -> Self {
        ToyConfig {
            learning_rate: 0.03,
            batch_size: 2,
            weight_decay: 0.01,
            seed,
            ..ToyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        if self.vocab_size < RESERVED_TOKENS {
            return Err(ToyError::BadConfig(format!(
                "vocab_size must be >= {RESERVED_TOKENS}, got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim < 2 {
            return Err(ToyError::BadConfig(format!(
                "embed_dim must be >= 2, got {}",
                self.embed_dim
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(ToyError::BadConfig(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(ToyError::BadConfig("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(ToyError::BadConfig("batch_size must be >= 1".to_string()));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 || self.beta > 1.0 {
            return Err(ToyError::BadConfig(format!("beta must lie in (0,1], got {}", self.beta)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(ToyError::BadConfig(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if let WeightSchedule::Constant(lam) = self.schedule {
            if !lam.is_finite() || !(0.0..=1.0).contains(&lam) {
                return Err(ToyError::BadConfig(format!(
                    "constant schedule weight must lie in [0,1], got {lam}"
                )));
            }
        }
        if self.sample_max_tokens < 1 {
            return Err(ToyError::BadConfig("sample_max_tokens must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// All learnable parameters.
///
/// Shapes: `embeddings` is vocab_size × embed_dim (one row per token);
/// `lm_weights` is embed_dim × vocab_size with bias `lm_bias` of length
/// vocab_size (logit of token j from context embedding e is
/// Σ_d e[d]·lm_weights[d][j] + lm_bias[j]); `reward_weights` is an embed_dim
/// vector with scalar `reward_bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub embeddings: Vec<Vec<f64>>,
    pub lm_weights: Vec<Vec<f64>>,
    pub lm_bias: Vec<f64>,
    pub reward_weights: Vec<f64>,
    pub reward_bias: f64,
}

impl ToyParams {
    pub fn zeros(cfg: &ToyConfig) -> Self {
        ToyParams {
            embeddings: vec![vec![0.0; cfg.embed_dim]; cfg.vocab_size],
            lm_weights: vec![vec![0.0; cfg.vocab_size]; cfg.embed_dim],
            lm_bias: vec![0.0; cfg.vocab_size],
            reward_weights: vec![0.0; cfg.embed_dim],
            reward_bias: 0.0,
        }
    }

    /// Uniform ±0.1 initialization, deterministic in the seed. Values are
    /// drawn in a fixed block order (embeddings, LM weights, LM bias, reward
    /// weights, reward bias).
    pub fn init(cfg: &ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["init"]));
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-0.1..0.1)).collect()
        };
        ToyParams {
            embeddings: (0..cfg.vocab_size).map(|_| draw(cfg.embed_dim)).collect(),
            lm_weights: (0..cfg.embed_dim).map(|_| draw(cfg.vocab_size)).collect(),
            lm_bias: draw(cfg.vocab_size),
            reward_weights: draw(cfg.embed_dim),
            reward_bias: draw(1)[0],
        }
    }

    fn shapes_match(&self, cfg: &ToyConfig) -> bool {
        self.embeddings.len() == cfg.vocab_size
            && self.embeddings.iter().all(|row| row.len() == cfg.embed_dim)
            && self.lm_weights.len() == cfg.embed_dim
            && self.lm_weights.iter().all(|row| row.len() == cfg.vocab_size)
            && self.lm_bias.len() == cfg.vocab_size
            && self.reward_weights.len() == cfg.embed_dim
    }

    fn all_finite(&self) -> bool {
        self.embeddings.iter().flatten().all(|v| v.is_finite())
            && self.lm_weights.iter().flatten().all(|v| v.is_finite())
            && self.lm_bias.iter().all(|v| v.is_finite())
            && self.reward_weights.iter().all(|v| v.is_finite())
            && self.reward_bias.is_finite()
    }
}

/// Gradient of the combined loss, one slot per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGrads {
    pub embeddings: Vec<Vec<f64>>,
    pub lm_weights: Vec<Vec<f64>>,
    pub lm_bias: Vec<f64>,
    pub reward_weights: Vec<f64>,
    pub reward_bias: f64,
}

impl ToyGrads {
    pub fn zeros(cfg: &ToyConfig) -> Self {
        let p = ToyParams::zeros(cfg);
        ToyGrads {
            embeddings: p.embeddings,
            lm_weights: p.lm_weights,
            lm_bias: p.lm_bias,
            reward_weights: p.reward_weights,
            reward_bias: p.reward_bias,
        }
    }

    /// self += other · scale
    pub fn accumulate(&mut self, other: &ToyGrads, scale: f64) {
        for (a, b) in self.embeddings.iter_mut().zip(&other.embeddings) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
        for (a, b) in self.lm_weights.iter_mut().zip(&other.lm_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
        for (x, y) in self.lm_bias.iter_mut().zip(&other.lm_bias) {
            *x += y * scale;
        }
        for (x, y) in self.reward_weights.iter_mut().zip(&other.reward_weights) {
            *x += y * scale;
        }
        self.reward_bias += other.reward_bias * scale;
    }
}

/// The three loss values of one example at a given λ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedParts {
    pub loss_critique: f64,
    pub loss_reward: f64,
    pub loss_combined: f64,
}

/// Tokenized view of one side of an example: prompt ids, response ids, and
/// one id list per critique.
struct SideTokens {
    prompt: Vec<usize>,
    response: Vec<usize>,
    critiques: Vec<Vec<usize>>,
}

/// One optimizer step's log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lambda: f64,
    pub loss_critique: f64,
    pub loss_reward: f64,
    pub loss_combined: f64,
}

/// Everything the trainer logged: one record per optimizer step plus one
/// held-out pairwise accuracy per epoch (absent when no held-out set was
/// given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainMetrics {
    pub steps: Vec<StepRecord>,
    pub epoch_accuracy: Vec<Option<f64>>,
}

impl TrainMetrics {
    /// Mean combined loss over the steps of one 0-based epoch.
    pub fn epoch_mean_combined(&self, epoch: u64, steps_per_epoch: u64) -> Option<f64> {
        let lo = epoch * steps_per_epoch + 1;
        let hi = (epoch + 1) * steps_per_epoch;
        let slice: Vec<f64> = self
            .steps
            .iter()
            .filter(|r| (lo..=hi).contains(&r.step))
            .map(|r| r.loss_combined)
            .collect();
        if slice.is_empty() {
            None
        } else {
            Some(slice.iter().sum::<f64>() / slice.len() as f64)
        }
    }
}

/// Model = config + vocabulary + parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub cfg: ToyConfig,
    pub vocab: Vocab,
    pub params: ToyParams,
}

fn check_ids(seq: &[usize], vocab_size: usize) -> Result<(), ToyError> {
    for &id in seq {
        if id >= vocab_size {
            return Err(ToyError::TokenOutOfRange { id, vocab_size });
        }
    }
    Ok(())
}

/// Stable log-sum-exp of a logit vector.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

impl ToyModel {
    pub fn new(cfg: ToyConfig, vocab: Vocab, params: ToyParams) -> Result<Self, ToyError> {
        cfg.validate()?;
        if vocab.len() != cfg.vocab_size {
            return Err(ToyError::BadConfig(format!(
                "vocab has {} words but config says vocab_size {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        if !params.shapes_match(&cfg) {
            return Err(ToyError::BadConfig("parameter shapes do not match config".to_string()));
        }
        if !params.all_finite() {
            return Err(ToyError::BadConfig("parameters contain non-finite entries".to_string()));
        }
        Ok(ToyModel { cfg, vocab, params })
    }

    /// Builds the vocabulary from the training set, initializes parameters
    /// from the config seed, and trains. The config's `vocab_size` is
    /// replaced by the corpus vocabulary size.
    pub fn train_from_scratch(
        cfg: ToyConfig,
        train_set: &[RefinedExample],
        held_out: &[RefinedExample],
    ) -> Result<(Self, TrainMetrics), ToyError> {
        cfg.validate()?;
        let mut texts: Vec<&str> = Vec::new();
        for ex in train_set {
            texts.push(&ex.pair.prompt);
            texts.push(&ex.pair.chosen);
            texts.push(&ex.pair.rejected);
            texts.extend(ex.critiques_chosen.iter().map(String::as_str));
            texts.extend(ex.critiques_rejected.iter().map(String::as_str));
        }
        let vocab = Vocab::build(texts);
        let cfg = ToyConfig { vocab_size: vocab.len(), ..cfg };
        let params = ToyParams::init(&cfg, cfg.seed);
        let mut model = ToyModel::new(cfg, vocab, params)?;
        let metrics = model.train(train_set, held_out)?;
        Ok((model, metrics))
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.vocab.tokenize(text)
    }

    fn logits(&self, context: usize) -> Result<Vec<f64>, ToyError> {
        check_ids(&[context], self.cfg.vocab_size)?;
        let mut logits = self.params.lm_bias.clone();
        let embedding = &self.params.embeddings[context];
        for (d, &e) in embedding.iter().enumerate() {
            let row = &self.params.lm_weights[d];
            for (j, l) in logits.iter_mut().enumerate() {
                *l += e * row[j];
            }
        }
        Ok(logits)
    }

    /// Log-probability of `next_token` given `context_token` under the bigram
    /// LM head: log softmax of (embedding[context] · lm_weights + lm_bias).
    pub fn lm_logprob(&self, context_token: usize, next_token: usize) -> Result<f64, ToyError> {
        check_ids(&[next_token], self.cfg.vocab_size)?;
        let logits = self.logits(context_token)?;
        Ok(logits[next_token] - log_sum_exp(&logits))
    }

    /// Log-probability of a whole sequence, each token conditioned on its
    /// predecessor with [BOS] prepended; a length-L sequence contributes L
    /// bigram terms.
    pub fn sequence_logprob(&self, seq: &[usize]) -> Result<f64, ToyError> {
        let mut total = 0.0;
        let mut prev = BOS;
        for &token in seq {
            total += self.lm_logprob(prev, token)?;
            prev = token;
        }
        Ok(total)
    }

    /// The bigram context chain a critique is scored (and sampled) under:
    /// [BOS], prompt, [SEP], response, [SEP]. The critique's first token
    /// conditions on the final [SEP].
    fn critique_context_start(
        &self,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<usize, ToyError> {
        check_ids(prompt, self.cfg.vocab_size)?;
        check_ids(response, self.cfg.vocab_size)?;
        Ok(SEP)
    }

    /// Summed token log-probability of `critique` conditioned on the
    /// prompt/response chain.
    pub fn critique_logprob(
        &self,
        prompt: &[usize],
        response: &[usize],
        critique: &[usize],
    ) -> Result<f64, ToyError> {
        let mut prev = self.critique_context_start(prompt, response)?;
        let mut total = 0.0;
        for &token in critique {
            total += self.lm_logprob(prev, token)?;
            prev = token;
        }
        Ok(total)
    }

    /// The pooled token span feeding the reward head: prompt, [SEP], response,
    /// [SEP], critique — everything before the [RWD] readout position.
    fn reward_span(
        prompt: &[usize],
        response: &[usize],
        critique: &[usize],
    ) -> Result<Vec<usize>, ToyError> {
        if prompt.is_empty() && response.is_empty() && critique.is_empty() {
            return Err(ToyError::EmptySpan);
        }
        let mut span = Vec::with_capacity(prompt.len() + response.len() + critique.len() + 2);
        span.extend_from_slice(prompt);
        span.push(SEP);
        span.extend_from_slice(response);
        span.push(SEP);
        span.extend_from_slice(critique);
        Ok(span)
    }

    /// Scalar reward of a (prompt, response, critique) triple: the mean of
    /// all span-token embeddings (the [RWD] position's representation) dotted
    /// with the reward weights, plus bias.
    pub fn reward_forward(
        &self,
        prompt: &[usize],
        response: &[usize],
        critique: &[usize],
    ) -> Result<f64, ToyError> {
        let span = Self::reward_span(prompt, response, critique)?;
        check_ids(&span, self.cfg.vocab_size)?;
        let dim = self.cfg.embed_dim;
        let mut mean = vec![0.0; dim];
        for &token in &span {
            for (d, m) in mean.iter_mut().enumerate() {
                *m += self.params.embeddings[token][d];
            }
        }
        let len = span.len() as f64;
        let mut reward = self.params.reward_bias;
        for (d, m) in mean.iter().enumerate() {
            reward += self.params.reward_weights[d] * (m / len);
        }
        Ok(reward)
    }

    /// Text-level convenience for [`ToyModel::reward_forward`].
    pub fn reward_for_text(
        &self,
        prompt: &str,
        response: &str,
        critique: &str,
    ) -> Result<f64, ToyError> {
        self.reward_forward(
            &self.tokenize(prompt),
            &self.tokenize(response),
            &self.tokenize(critique),
        )
    }

    fn side_token_ids(
        &self,
        example: &RefinedExample,
        chosen: bool,
    ) -> Result<SideTokens, ToyError> {
        let prompt = self.tokenize(&example.pair.prompt);
        let (response_text, critiques) = if chosen {
            (&example.pair.chosen, &example.critiques_chosen)
        } else {
            (&example.pair.rejected, &example.critiques_rejected)
        };
        if critiques.is_empty() {
            return Err(ToyError::MissingCritique {
                pair_id: example.pair.id.clone(),
                side: if chosen { "chosen" } else { "rejected" },
            });
        }
        let response = self.tokenize(response_text);
        let critiques = critiques.iter().map(|c| self.tokenize(c)).collect();
        Ok(SideTokens {
            prompt,
            response,
            critiques,
        })
    }

    /// Loss values for one example at weight `lam`. The critique loss
    /// averages the log-probabilities of every critique on each side; the
    /// reward loss scores each side with its first critique (the refinement
    /// stage orders critiques best-first, so the first is the side's
    /// representative).
    pub fn combined_parts(
        &self,
        example: &RefinedExample,
        lam: f64,
    ) -> Result<CombinedParts, ToyError> {
        let SideTokens {
            prompt,
            response: resp_plus,
            critiques: crit_plus,
        } = self.side_token_ids(example, true)?;
        let SideTokens {
            response: resp_minus,
            critiques: crit_minus,
            ..
        } = self.side_token_ids(example, false)?;

        let logq = |resp: &[usize], crits: &[Vec<usize>]| -> Result<Vec<f64>, ToyError> {
            crits.iter().map(|c| self.critique_logprob(&prompt, resp, c)).collect()
        };
        let lp_plus = CritiqueLogProbs::new(logq(&resp_plus, &crit_plus)?);
        let lp_minus = CritiqueLogProbs::new(logq(&resp_minus, &crit_minus)?);
        let loss_critique = objective::critique_pair_loss(&lp_plus, &lp_minus)?;

        let r_plus = self.reward_forward(&prompt, &resp_plus, &crit_plus[0])?;
        let r_minus = self.reward_forward(&prompt, &resp_minus, &crit_minus[0])?;
        let loss_reward = objective::bt_loss(RewardPair { r_plus, r_minus })?;

        let loss_combined = objective::combined_loss(loss_critique, loss_reward, lam)?;
        Ok(CombinedParts { loss_critique, loss_reward, loss_combined })
    }

    /// Accumulates the softmax-NLL gradient of one bigram step, scaled by
    /// `weight`: with probabilities p and target y, ∂loss/∂logit_j = p_j − δ_jy,
    /// which backpropagates to the LM weights, LM bias, and the context
    /// token's embedding.
    fn accumulate_bigram_grad(
        &self,
        grads: &mut ToyGrads,
        prev: usize,
        next: usize,
        weight: f64,
    ) -> Result<(), ToyError> {
        check_ids(&[next], self.cfg.vocab_size)?;
        let logits = self.logits(prev)?;
        let lse = log_sum_exp(&logits);
        let embedding = &self.params.embeddings[prev];
        for (j, &logit) in logits.iter().enumerate() {
            let mut coef = (logit - lse).exp();
            if j == next {
                coef -= 1.0;
            }
            let scaled = weight * coef;
            grads.lm_bias[j] += scaled;
            for (d, &emb) in embedding.iter().enumerate() {
                grads.lm_weights[d][j] += scaled * emb;
                grads.embeddings[prev][d] += scaled * self.params.lm_weights[d][j];
            }
        }
        Ok(())
    }

    /// Accumulates the reward-branch gradient for one side, scaled by
    /// `dl_dr` (∂loss/∂reward of that side): the reward weights see the
    /// pooled mean embedding, the bias sees 1, and every span token's
    /// embedding sees reward_weights / span_len per occurrence.
    fn accumulate_reward_grad(
        &self,
        grads: &mut ToyGrads,
        prompt: &[usize],
        response: &[usize],
        critique: &[usize],
        dl_dr: f64,
    ) -> Result<(), ToyError> {
        let span = Self::reward_span(prompt, response, critique)?;
        check_ids(&span, self.cfg.vocab_size)?;
        let len = span.len() as f64;
        let mut mean = vec![0.0; self.cfg.embed_dim];
        for &token in &span {
            for (d, m) in mean.iter_mut().enumerate() {
                *m += self.params.embeddings[token][d];
            }
        }
        for (d, m) in mean.iter().enumerate() {
            grads.reward_weights[d] += dl_dr * (m / len);
        }
        grads.reward_bias += dl_dr;
        for &token in &span {
            for d in 0..self.cfg.embed_dim {
                grads.embeddings[token][d] += dl_dr * self.params.reward_weights[d] / len;
            }
        }
        Ok(())
    }

    /// Exact analytic gradient of the combined loss of one example at weight
    /// `lam`, matching [`ToyModel::combined_parts`]. When `lam` is exactly 0
    /// or 1 the switched-off branch contributes exact zeros.
    pub fn grad_combined(
        &self,
        example: &RefinedExample,
        lam: f64,
    ) -> Result<ToyGrads, ToyError> {
        if !(0.0..=1.0).contains(&lam) || !lam.is_finite() {
            return Err(ObjectiveError::WeightOutOfRange(lam).into());
        }
        let SideTokens {
            prompt,
            response: resp_plus,
            critiques: crit_plus,
        } = self.side_token_ids(example, true)?;
        let SideTokens {
            response: resp_minus,
            critiques: crit_minus,
            ..
        } = self.side_token_ids(example, false)?;
        let mut grads = ToyGrads::zeros(&self.cfg);

        if lam != 0.0 {
            // Critique branch: −(1/K)Σ log q per side, sides summed, all
            // scaled by λ. Each bigram step therefore carries λ/K_side.
            for (resp, crits) in [(&resp_plus, &crit_plus), (&resp_minus, &crit_minus)] {
                let weight = lam / crits.len() as f64;
                for critique in crits.iter() {
                    let mut prev = self.critique_context_start(&prompt, resp)?;
                    for &token in critique {
                        self.accumulate_bigram_grad(&mut grads, prev, token, weight)?;
                        prev = token;
                    }
                }
            }
        }

        if lam != 1.0 {
            // Reward branch: loss = softplus(−(r⁺−r⁻)), so ∂loss/∂r⁺ =
            // σ(r⁺−r⁻) − 1 and ∂loss/∂r⁻ is its negation, scaled by 1−λ.
            let r_plus = self.reward_forward(&prompt, &resp_plus, &crit_plus[0])?;
            let r_minus = self.reward_forward(&prompt, &resp_minus, &crit_minus[0])?;
            let margin = r_plus - r_minus;
            let sigma = if margin >= 0.0 {
                1.0 / (1.0 + (-margin).exp())
            } else {
                let e = margin.exp();
                e / (1.0 + e)
            };
            let g = (1.0 - lam) * (sigma - 1.0);
            self.accumulate_reward_grad(&mut grads, &prompt, &resp_plus, &crit_plus[0], g)?;
            self.accumulate_reward_grad(&mut grads, &prompt, &resp_minus, &crit_minus[0], -g)?;
        }

        Ok(grads)
    }

    /// Fraction of held-out examples whose chosen side outscores the rejected
    /// side, each scored with its first critique. Ties count as misses.
    pub fn holdout_accuracy(&self, held_out: &[RefinedExample]) -> Result<f64, ToyError> {
        if held_out.is_empty() {
            return Err(ToyError::EmptyDataset);
        }
        let mut correct = 0usize;
        for example in held_out {
            let SideTokens {
                prompt,
                response: resp_plus,
                critiques: crit_plus,
            } = self.side_token_ids(example, true)?;
            let SideTokens {
                response: resp_minus,
                critiques: crit_minus,
                ..
            } = self.side_token_ids(example, false)?;
            let r_plus = self.reward_forward(&prompt, &resp_plus, &crit_plus[0])?;
            let r_minus = self.reward_forward(&prompt, &resp_minus, &crit_minus[0])?;
            if r_plus > r_minus {
                correct += 1;
            }
        }
        Ok(correct as f64 / held_out.len() as f64)
    }

    /// The critique weight for optimizer step `t` under the configured
    /// schedule.
    pub fn schedule_value(&self, t: u64, steps_per_epoch: u64) -> Result<f64, ToyError> {
        match self.cfg.schedule {
            WeightSchedule::Constant(lam) => Ok(lam),
            WeightSchedule::Dynamic => {
                let p = ScheduleParams::new(steps_per_epoch, self.cfg.epochs, self.cfg.beta)?;
                Ok(objective::lambda_at(t, &p)?)
            }
            WeightSchedule::Reverse => {
                // Mirror the dynamic sequence: step 1 gets the dynamic
                // schedule's final value, the last step gets 1.
                let p = ScheduleParams::new(steps_per_epoch, self.cfg.epochs, self.cfg.beta)?;
                Ok(objective::lambda_at(p.final_step() + 1 - t, &p)?)
            }
        }
    }

    /// Minibatch training: ceil(n/batch_size) optimizer steps per epoch over
    /// a per-epoch seeded shuffle, λ evaluated fresh at every step, gradients
    /// averaged across the batch, decoupled weight decay, and one held-out
    /// accuracy probe per epoch. Deterministic for a fixed config seed.
    pub fn train(
        &mut self,
        train_set: &[RefinedExample],
        held_out: &[RefinedExample],
    ) -> Result<TrainMetrics, ToyError> {
        if train_set.is_empty() {
            return Err(ToyError::EmptyDataset);
        }
        self.cfg.validate()?;
        let n = train_set.len();
        let steps_per_epoch = n.div_ceil(self.cfg.batch_size) as u64;
        let mut metrics = TrainMetrics::default();
        let mut opt = OptimizerState::new(&self.cfg);
        let mut step: u64 = 0;

        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.cfg.seed,
                &["shuffle", &epoch.to_string()],
            ));
            // Fisher–Yates, fixed by the per-epoch seed.
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }

            for batch in order.chunks(self.cfg.batch_size) {
                step += 1;
                let lam = self.schedule_value(step, steps_per_epoch)?;
                let mut batch_grads = ToyGrads::zeros(&self.cfg);
                let mut sum_c = 0.0;
                let mut sum_r = 0.0;
                for &idx in batch {
                    let example = &train_set[idx];
                    let parts =
                        self.combined_parts(example, lam).map_err(|e| at_step(e, step))?;
                    sum_c += parts.loss_critique;
                    sum_r += parts.loss_reward;
                    let grads = self.grad_combined(example, lam).map_err(|e| at_step(e, step))?;
                    batch_grads.accumulate(&grads, 1.0);
                }
                let scale = 1.0 / batch.len() as f64;
                let loss_critique = sum_c * scale;
                let loss_reward = sum_r * scale;
                let loss_combined = objective::combined_loss(loss_critique, loss_reward, lam)?;
                if !loss_critique.is_finite()
                    || !loss_reward.is_finite()
                    || !loss_combined.is_finite()
                {
                    return Err(ToyError::Diverged { step });
                }
                opt.apply(&self.cfg, &mut self.params, &batch_grads, scale, step);
                if !self.params.all_finite() {
                    return Err(ToyError::Diverged { step });
                }
                metrics.steps.push(StepRecord {
                    step,
                    lambda: lam,
                    loss_critique,
                    loss_reward,
                    loss_combined,
                });
            }

            let accuracy = if held_out.is_empty() {
                None
            } else {
                Some(self.holdout_accuracy(held_out)?)
            };
            log::info!(
                "epoch {}/{}: mean combined loss {:.4}, held-out accuracy {:?}",
                epoch + 1,
                self.cfg.epochs,
                metrics.epoch_mean_combined(epoch, steps_per_epoch).unwrap_or(f64::NAN),
                accuracy
            );
            metrics.epoch_accuracy.push(accuracy);
        }
        Ok(metrics)
    }

    /// Samples one critique as text, conditioned on the prompt/response
    /// chain. Temperature 0 is greedy (ties broken toward the lowest id);
    /// otherwise tokens are drawn from the temperature-scaled softmax.
    /// Generation stops at any reserved token or after
    /// `cfg.sample_max_tokens` tokens.
    pub fn sample_critique(
        &self,
        prompt: &str,
        response: &str,
        temperature: f64,
        seed: u64,
    ) -> Result<String, ToyError> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(ToyError::BadConfig(format!(
                "sampling temperature must be finite and >= 0, got {temperature}"
            )));
        }
        let prompt_ids = self.tokenize(prompt);
        let response_ids = self.tokenize(response);
        let mut prev = self.critique_context_start(&prompt_ids, &response_ids)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..self.cfg.sample_max_tokens {
            let logits = self.logits(prev)?;
            let next = if temperature == 0.0 {
                let mut best = 0usize;
                for (j, &l) in logits.iter().enumerate() {
                    if l > logits[best] {
                        best = j;
                    }
                }
                best
            } else {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                let lse = log_sum_exp(&scaled);
                let r: f64 = rng.random_range(0.0..1.0);
                let mut cumulative = 0.0;
                let mut chosen = self.cfg.vocab_size - 1;
                for (j, &l) in scaled.iter().enumerate() {
                    cumulative += (l - lse).exp();
                    if cumulative > r {
                        chosen = j;
                        break;
                    }
                }
                chosen
            };
            if next < RESERVED_TOKENS {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(self.vocab.detokenize(&out))
    }
}

/// Rewrites errors caused by non-finite values as a divergence at the given
/// optimizer step, so training blow-ups always report where they happened.
fn at_step(err: ToyError, step: u64) -> ToyError {
    match &err {
        ToyError::Objective(ObjectiveError::NonFinite { .. }) => ToyError::Diverged { step },
        ToyError::Objective(ObjectiveError::InvalidLogProb { value, .. })
            if !value.is_finite() =>
        {
            ToyError::Diverged { step }
        }
        _ => err,
    }
}

/// Optimizer scratch state (adaptive moments when configured).
struct OptimizerState {
    m: Option<Box<ToyGrads>>,
    v: Option<Box<ToyGrads>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    fn new(cfg: &ToyConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => OptimizerState { m: None, v: None },
            OptimizerKind::Adam => OptimizerState {
                m: Some(Box::new(ToyGrads::zeros(cfg))),
                v: Some(Box::new(ToyGrads::zeros(cfg))),
            },
        }
    }

    /// Applies one update with gradient `grads · grad_scale` (the batch
    /// mean), then decoupled weight decay θ ← θ − lr·wd·θ.
    fn apply(
        &mut self,
        cfg: &ToyConfig,
        params: &mut ToyParams,
        grads: &ToyGrads,
        grad_scale: f64,
        step: u64,
    ) {
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for_each_param(params, grads, None, None, |theta, g, _, _| {
                    *theta -= lr * (g * grad_scale);
                });
            }
            OptimizerKind::Adam => {
                let t = step as i32;
                let bias1 = 1.0 - ADAM_BETA1.powi(t);
                let bias2 = 1.0 - ADAM_BETA2.powi(t);
                let m = self.m.as_mut().expect("adam first moment");
                let v = self.v.as_mut().expect("adam second moment");
                for_each_param(params, grads, Some(m), Some(v), |theta, g, m, v| {
                    let g = g * grad_scale;
                    let m = m.expect("adam first moment slot");
                    let v = v.expect("adam second moment slot");
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                });
            }
        }
        if cfg.weight_decay > 0.0 {
            let shrink = lr * cfg.weight_decay;
            for_each_param(params, grads, None, None, |theta, _, _, _| {
                *theta -= shrink * *theta;
            });
        }
    }
}

/// Visits every parameter slot with its gradient slot (and optional moment
/// slots) in a fixed block order.
fn for_each_param(
    params: &mut ToyParams,
    grads: &ToyGrads,
    mut m: Option<&mut ToyGrads>,
    mut v: Option<&mut ToyGrads>,
    mut f: impl FnMut(&mut f64, f64, Option<&mut f64>, Option<&mut f64>),
) {
    for i in 0..params.embeddings.len() {
        for d in 0..params.embeddings[i].len() {
            f(
                &mut params.embeddings[i][d],
                grads.embeddings[i][d],
                m.as_deref_mut().map(|s| &mut s.embeddings[i][d]),
                v.as_deref_mut().map(|s| &mut s.embeddings[i][d]),
            );
        }
    }
    for d in 0..params.lm_weights.len() {
        for j in 0..params.lm_weights[d].len() {
            f(
                &mut params.lm_weights[d][j],
                grads.lm_weights[d][j],
                m.as_deref_mut().map(|s| &mut s.lm_weights[d][j]),
                v.as_deref_mut().map(|s| &mut s.lm_weights[d][j]),
            );
        }
    }
    for j in 0..params.lm_bias.len() {
        f(
            &mut params.lm_bias[j],
            grads.lm_bias[j],
            m.as_deref_mut().map(|s| &mut s.lm_bias[j]),
            v.as_deref_mut().map(|s| &mut s.lm_bias[j]),
        );
    }
    for d in 0..params.reward_weights.len() {
        f(
            &mut params.reward_weights[d],
            grads.reward_weights[d],
            m.as_deref_mut().map(|s| &mut s.reward_weights[d]),
            v.as_deref_mut().map(|s| &mut s.reward_weights[d]),
        );
    }
    f(
        &mut params.reward_bias,
        grads.reward_bias,
        m.map(|s| &mut s.reward_bias),
        v.map(|s| &mut s.reward_bias),
    );
}

/// Number of scalar parameters for a config.
pub fn param_count(cfg: &ToyConfig) -> usize {
    cfg.vocab_size * cfg.embed_dim // embeddings
        + cfg.embed_dim * cfg.vocab_size // lm weights
        + cfg.vocab_size // lm bias
        + cfg.embed_dim // reward weights
        + 1 // reward bias
}

/// Flattens parameters into one vector: embeddings row-major, LM weights
/// row-major, LM bias, reward weights, reward bias.
pub fn flatten_params(params: &ToyParams) -> Vec<f64> {
    let mut flat = Vec::new();
    for row in &params.embeddings {
        flat.extend_from_slice(row);
    }
    for row in &params.lm_weights {
        flat.extend_from_slice(row);
    }
    flat.extend_from_slice(&params.lm_bias);
    flat.extend_from_slice(&params.reward_weights);
    flat.push(params.reward_bias);
    flat
}

/// Inverse of [`flatten_params`] for a given config.
pub fn unflatten_params(cfg: &ToyConfig, flat: &[f64]) -> ToyParams {
    assert_eq!(flat.len(), param_count(cfg), "flat parameter vector has the wrong length");
    let mut it = flat.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { (0..n).map(|_| it.next().unwrap()).collect() };
    ToyParams {
        embeddings: (0..cfg.vocab_size).map(|_| take(cfg.embed_dim)).collect(),
        lm_weights: (0..cfg.embed_dim).map(|_| take(cfg.vocab_size)).collect(),
        lm_bias: take(cfg.vocab_size),
        reward_weights: take(cfg.embed_dim),
        reward_bias: it.next().unwrap(),
    }
}

/// Central-finite-difference gradient of the combined loss with respect to
/// every parameter, used as the independent oracle for
/// [`ToyModel::grad_combined`].
pub fn finite_difference_gradient(
    model: &ToyModel,
    example: &RefinedExample,
    lam: f64,
    epsilon: f64,
) -> Result<Vec<f64>, ToyError> {
    let base = flatten_params(&model.params);
    let mut grad = vec![0.0; base.len()];
    let eval = |flat: &[f64]| -> Result<f64, ToyError> {
        let probe = ToyModel {
            cfg: model.cfg.clone(),
            vocab: model.vocab.clone(),
            params: unflatten_params(&model.cfg, flat),
        };
        Ok(probe.combined_parts(example, lam)?.loss_combined)
    };
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + epsilon;
        let up = eval(&flat)?;
        flat[i] = base[i] - epsilon;
        let down = eval(&flat)?;
        flat[i] = base[i];
        grad[i] = (up - down) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Largest elementwise relative error between two gradient vectors, with the
/// denominator floored at 1e-6 so near-zero slots compare absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// A small random model + example for gradient checking: vocabulary of 8
/// (4 reserved + 4 words), embedding dim 4, 1–3 critiques per side, and a
/// random interior λ.
pub fn gradcheck_instance(seed: u64) -> (ToyModel, RefinedExample, f64) {
    use crate::dataset::{Domain, PreferencePair};
    let words = ["alpha", "beta", "gamma", "delta"];
    let cfg = ToyConfig {
        vocab_size: RESERVED_TOKENS + words.len(),
        embed_dim: 4,
        ..ToyConfig::toy_profile(seed)
    };
    let vocab = Vocab::build(words.iter().map(|w| &**w));
    let params = ToyParams::init(&cfg, seed);
    let model = ToyModel::new(cfg, vocab, params).expect("gradcheck model is valid");

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["gradcheck-example"]));
    fn text(rng: &mut ChaCha8Rng, words: &[&str], len_lo: usize, len_hi: usize) -> String {
        let len = rng.random_range(len_lo..=len_hi);
        (0..len)
            .map(|_| words[rng.random_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    }
    let k_plus = rng.random_range(1..=3);
    let k_minus = rng.random_range(1..=3);
    let example = RefinedExample {
        pair: PreferencePair {
            id: format!("gradcheck-{seed}"),
            domain: Domain::Chat,
            prompt: text(&mut rng, &words, 1, 4),
            chosen: text(&mut rng, &words, 1, 5),
            rejected: text(&mut rng, &words, 1, 5),
        },
        critiques_chosen: (0..k_plus).map(|_| text(&mut rng, &words, 1, 6)).collect(),
        critiques_rejected: (0..k_minus).map(|_| text(&mut rng, &words, 1, 6)).collect(),
        refinement: crate::dataset::RefinementMode::Rank,
    };
    let lam = rng.random_range(0.05..0.95);
    (model, example, lam)
}

/// On-disk checkpoint layout: a single JSON document with a format version,
/// the config, the vocabulary word list (reserved names first), and all
/// parameter blocks.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ToyConfig,
    words: Vec<String>,
    params: ToyParams,
}

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

impl ToyModel {
    /// Canonical serialized form of the model; identical models produce
    /// identical bytes.
    pub fn canonical_json(&self) -> String {
        let checkpoint = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            words: self.vocab.words().to_vec(),
            params: self.params.clone(),
        };
        serde_json::to_string(&checkpoint).expect("checkpoint serializes infallibly")
    }

    /// Hex digest of the canonical checkpoint bytes; changes iff the model
    /// changes.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.canonical_json())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ToyError> {
        std::fs::write(path, self.canonical_json() + "\n").map_err(|e| ToyError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ToyError> {
        let display = path.display().to_string();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ToyError::Checkpoint { path: display.clone(), message: e.to_string() })?;
        let checkpoint: Checkpoint = serde_json::from_str(&raw)
            .map_err(|e| ToyError::Checkpoint { path: display.clone(), message: e.to_string() })?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(ToyError::Checkpoint {
                path: display,
                message: format!(
                    "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                    checkpoint.version
                ),
            });
        }
        let vocab = Vocab::from_words(checkpoint.words)?;
        ToyModel::new(checkpoint.config, vocab, checkpoint.params)
    }
}
