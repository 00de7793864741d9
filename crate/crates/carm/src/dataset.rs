//! Preference-pair datasets: record types, line-delimited file I/O, prompt
//! decontamination, and a synthetic corpus generator.
//!
//! All on-disk formats are line-delimited JSON, one record per line, so files
//! stream, diff, and concatenate cleanly. Loaders report the 1-based line number
//! of every malformed record and reject duplicate pair ids; writers emit records
//! in input order so files are byte-stable for a given input.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::derive_seed;

/// Task family of a preference pair. Decides which judge template critiques it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    #[default]
    Chat,
    Math,
    Code,
    Safety,
}

impl Domain {
    /// All domains, in the fixed order used for round-robin assignment.
    pub const ALL: [Domain; 4] = [Domain::Chat, Domain::Math, Domain::Code, Domain::Safety];

    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Chat => "chat",
            Domain::Math => "math",
            Domain::Code => "code",
            Domain::Safety => "safety",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which response of a pair a critique set talks about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Chosen,
    Rejected,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Chosen => "chosen",
            Side::Rejected => "rejected",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the N candidate critiques of a side were distilled into K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinementMode {
    /// Summarize shuffled candidate lists into K fresh critiques.
    Summ,
    /// Meta-score each candidate and keep the top K.
    Rank,
}

impl RefinementMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefinementMode::Summ => "summ",
            RefinementMode::Rank => "rank",
        }
    }
}

impl fmt::Display for RefinementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One preference-labeled example: the same prompt with a preferred (`chosen`)
/// and a dispreferred (`rejected`) response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    /// Absent in input files means [`Domain::Chat`].
    #[serde(default)]
    pub domain: Domain,
}

/// One sampled critique of one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueCandidate {
    pub text: String,
    /// Rating parsed from the critique text; absent when no rating could be
    /// extracted (the candidate still counts toward N).
    pub rating: Option<u8>,
    /// 0-based position in the sampling order.
    pub gen_index: usize,
}

/// All candidate critiques generated for one side of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueSet {
    pub pair_id: String,
    pub side: Side,
    pub candidates: Vec<CritiqueCandidate>,
}

/// A pair that survived filtering, carrying its K refined critiques per side.
///
/// Serialized flat: the pair's own fields plus the critique arrays, so refined
/// files are a superset of pair files and load with either schema's reader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedExample {
    #[serde(flatten)]
    pub pair: PreferencePair,
    pub critiques_chosen: Vec<String>,
    pub critiques_rejected: Vec<String>,
    pub refinement: RefinementMode,
}

/// Hidden ground truth emitted next to a synthetic corpus: whether each side's
/// response carries the planted quality marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub id: String,
    pub chosen_marker: bool,
    pub rejected_marker: bool,
}

/// A synthetic corpus: pairs plus their hidden gold labels, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub pairs: Vec<PreferencePair>,
    pub gold: Vec<GoldLabel>,
}

/// Controls for [`synth_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pairs: usize,
    /// In [0, 1]: the target gap between chosen and rejected marker frequency.
    /// 0 makes both sides statistically identical; 1 plants the marker in every
    /// chosen response and no rejected one.
    pub signal_strength: f64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate pair id \"{id}\"")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: field \"{field}\" must be nonempty")]
    EmptyField {
        path: String,
        line: usize,
        field: &'static str,
    },
    #[error("{path}:{line}: rating {value} is outside 1..=10")]
    RatingOutOfRange {
        path: String,
        line: usize,
        value: u8,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("signal_strength {0} is outside [0, 1]")]
    SignalOutOfRange(f64),
}

/// Reads one typed record per line, handing each (line number, record) to a
/// validation callback. Blank lines are malformed records, not separators.
pub(crate) fn load_records<T, F>(path: &Path, mut validate: F) -> Result<Vec<T>, DatasetError>
where
    T: DeserializeOwned,
    F: FnMut(usize, &T) -> Result<(), DatasetError>,
{
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: display.clone(),
            source,
        })?;
        let record: T = serde_json::from_str(&line).map_err(|err| DatasetError::Malformed {
            path: display.clone(),
            line: line_no,
            message: err.to_string(),
        })?;
        validate(line_no, &record)?;
        records.push(record);
    }
    Ok(records)
}

/// Writes one JSON record per line, in input order.
pub(crate) fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DatasetError> {
    let display = path.display().to_string();
    let wrap = |source| DatasetError::Write {
        path: display.clone(),
        source,
    };
    let file = File::create(path).map_err(wrap)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let json = serde_json::to_string(record).expect("record types serialize infallibly");
        writer.write_all(json.as_bytes()).map_err(wrap)?;
        writer.write_all(b"\n").map_err(wrap)?;
    }
    writer.flush().map_err(wrap)
}

fn require_nonempty(
    path: &Path,
    line: usize,
    field: &'static str,
    value: &str,
) -> Result<(), DatasetError> {
    if value.is_empty() {
        return Err(DatasetError::EmptyField {
            path: path.display().to_string(),
            line,
            field,
        });
    }
    Ok(())
}

/// Loads preference pairs, rejecting malformed lines (with their line number),
/// empty required fields, and duplicate ids.
pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, DatasetError> {
    let mut seen: HashSet<String> = HashSet::new();
    load_records(path, |line, pair: &PreferencePair| {
        require_nonempty(path, line, "id", &pair.id)?;
        require_nonempty(path, line, "prompt", &pair.prompt)?;
        require_nonempty(path, line, "chosen", &pair.chosen)?;
        require_nonempty(path, line, "rejected", &pair.rejected)?;
        if !seen.insert(pair.id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: path.display().to_string(),
                line,
                id: pair.id.clone(),
            });
        }
        Ok(())
    })
}

/// Writes preference pairs, one JSON record per line.
pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<(), DatasetError> {
    write_records(path, pairs)
}

/// Loads critique sets, validating any stored ratings against the 1–10 scale.
pub fn load_critique_sets(path: &Path) -> Result<Vec<CritiqueSet>, DatasetError> {
    load_records(path, |line, set: &CritiqueSet| {
        require_nonempty(path, line, "pair_id", &set.pair_id)?;
        for candidate in &set.candidates {
            if let Some(rating) = candidate.rating {
                if !(1..=10).contains(&rating) {
                    return Err(DatasetError::RatingOutOfRange {
                        path: path.display().to_string(),
                        line,
                        value: rating,
                    });
                }
            }
        }
        Ok(())
    })
}

/// Writes critique sets, one JSON record per line.
pub fn write_critique_sets(path: &Path, sets: &[CritiqueSet]) -> Result<(), DatasetError> {
    write_records(path, sets)
}

/// Loads refined examples; same pair validation as [`load_pairs`] plus a check
/// that both critique arrays are nonempty.
pub fn load_refined(path: &Path) -> Result<Vec<RefinedExample>, DatasetError> {
    let mut seen: HashSet<String> = HashSet::new();
    load_records(path, |line, example: &RefinedExample| {
        let pair = &example.pair;
        require_nonempty(path, line, "id", &pair.id)?;
        require_nonempty(path, line, "prompt", &pair.prompt)?;
        require_nonempty(path, line, "chosen", &pair.chosen)?;
        require_nonempty(path, line, "rejected", &pair.rejected)?;
        if example.critiques_chosen.is_empty() {
            return Err(DatasetError::EmptyField {
                path: path.display().to_string(),
                line,
                field: "critiques_chosen",
            });
        }
        if example.critiques_rejected.is_empty() {
            return Err(DatasetError::EmptyField {
                path: path.display().to_string(),
                line,
                field: "critiques_rejected",
            });
        }
        if !seen.insert(pair.id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: path.display().to_string(),
                line,
                id: pair.id.clone(),
            });
        }
        Ok(())
    })
}

/// Writes refined examples, one JSON record per line. Round-trips through
/// [`load_refined`].
pub fn write_refined(path: &Path, examples: &[RefinedExample]) -> Result<(), DatasetError> {
    write_records(path, examples)
}

/// Normal form used for decontamination matching: lowercased, whitespace runs
/// collapsed to single spaces, leading/trailing whitespace removed.
pub fn normalize_prompt(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops every pair whose prompt matches a held-out prompt after
/// normalization. Returns the surviving pairs (input order preserved) and the
/// number removed. Applying the same call twice removes nothing the second
/// time.
pub fn decontaminate(
    pairs: Vec<PreferencePair>,
    heldout_prompts: &[String],
) -> (Vec<PreferencePair>, usize) {
    let blocked: HashSet<String> = heldout_prompts.iter().map(|p| normalize_prompt(p)).collect();
    let before = pairs.len();
    let kept: Vec<PreferencePair> = pairs
        .into_iter()
        .filter(|pair| !blocked.contains(&normalize_prompt(&pair.prompt)))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// The planted quality marker: the ordered phrase "verified sources". Every
/// synthetic response mentions both sourcing words, but only marked responses
/// put them in this order; unmarked ones invert it ("sources verified"). A
/// bag-of-words reader therefore sees (almost) identical token statistics on
/// both sides — the quality signal lives in word order, which is exactly what
/// a judge reading the text can name in a critique and what an order-blind
/// mean-pooled reward head cannot extract on its own. The generator plants
/// the marker in chosen responses with probability (1 + signal)/2 and in
/// rejected ones with probability (1 − signal)/2, so the chosen-minus-rejected
/// marker-frequency gap converges to `signal_strength`.
pub const QUALITY_MARKER: &str = "verified sources";

/// The inverted, lower-quality form of the sourcing phrase.
pub const INVERTED_MARKER: &str = "sources verified";

/// True when `text` contains the quality-marker words adjacent and in order.
pub fn has_quality_marker(text: &str) -> bool {
    let marker: Vec<&str> = QUALITY_MARKER.split_whitespace().collect();
    let words: Vec<&str> = text.split_whitespace().collect();
    words.windows(marker.len()).any(|window| window == marker)
}

const PROMPT_TOPICS: [&str; 6] = ["budget", "schedule", "experiment", "design", "survey", "release"];
const NOUNS: [&str; 8] =
    ["report", "method", "answer", "summary", "argument", "plan", "draft", "analysis"];
const VERBS: [&str; 6] = ["covers", "misses", "explains", "addresses", "reviews", "outlines"];
const ADJECTIVES: [&str; 6] = ["broad", "narrow", "recent", "formal", "simple", "detailed"];

/// Generates a seeded synthetic preference corpus with hidden gold labels.
///
/// Every pair gets a unique prompt, a domain assigned round-robin, and two
/// responses built from a small filler vocabulary; the marker phrase is planted
/// per the probabilities documented on [`QUALITY_MARKER`]. Output is
/// byte-identical across calls with the same config.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, DatasetError> {
    if !(0.0..=1.0).contains(&cfg.signal_strength) || !cfg.signal_strength.is_finite() {
        return Err(DatasetError::SignalOutOfRange(cfg.signal_strength));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["synth-corpus"]));
    let p_chosen = (1.0 + cfg.signal_strength) / 2.0;
    let p_rejected = (1.0 - cfg.signal_strength) / 2.0;

    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut gold = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let id = format!("synth-{i:05}");
        let domain = Domain::ALL[i % Domain::ALL.len()];
        let topic = PROMPT_TOPICS[rng.random_range(0..PROMPT_TOPICS.len())];
        let noun = NOUNS[rng.random_range(0..NOUNS.len())];
        let prompt = format!("please review the {topic} {noun} for item {i} and assess its quality");

        let chosen_marker = rng.random_bool(p_chosen);
        let rejected_marker = rng.random_bool(p_rejected);
        let chosen = synth_response(&mut rng, chosen_marker);
        let rejected = synth_response(&mut rng, rejected_marker);

        pairs.push(PreferencePair { id: id.clone(), prompt, chosen, rejected, domain });
        gold.push(GoldLabel { id, chosen_marker, rejected_marker });
    }
    Ok(SynthCorpus { pairs, gold })
}

fn synth_response(rng: &mut ChaCha8Rng, marker: bool) -> String {
    let noun_a = NOUNS[rng.random_range(0..NOUNS.len())];
    let verb = VERBS[rng.random_range(0..VERBS.len())];
    let adj_a = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
    let noun_b = NOUNS[rng.random_range(0..NOUNS.len())];
    let adj_b = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
    let sourcing = if marker { QUALITY_MARKER } else { INVERTED_MARKER };
    // Half the unmarked responses slip into "quoting": a faint token-level
    // trace of quality that keeps order-blind models above chance while the
    // full signal stays in the phrase order.
    let citing = if marker || rng.random_bool(0.5) { "citing" } else { "quoting" };
    format!("this {noun_a} {verb} the {adj_a} {noun_b} in a {adj_b} way {citing} {sourcing}")
}

/// Writes gold labels, one JSON record per line.
pub fn write_gold(path: &Path, gold: &[GoldLabel]) -> Result<(), DatasetError> {
    write_records(path, gold)
}
