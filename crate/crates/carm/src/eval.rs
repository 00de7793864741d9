//! Evaluation metrics: pairwise accuracy over reward comparisons, verdict
//! extraction from critique text, critique-verdict F1, and byte-stable
//! report emission.
//!
//! Tie policy: an exact reward tie scores `tie_credit` (default 0 — a
//! scorer that cannot separate a pair has failed that comparison). The
//! credit is a parameter so callers can run sensitivity analyses.
//!
//! Verdict parsing searches only the final sentence region of a critique.
//! Negated markers are checked first, so "not correct" reads as incorrect
//! even though it contains "correct". Markers are configurable because
//! verdict phrasing varies across critique styles; the defaults are
//! "incorrect" / "not correct" (negative) and "correct" (positive).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError};

/// One reward comparison to grade: the scores both sides of a preference
/// pair received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub category: String,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
}

/// What a critique claimed about the response it judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictLabel {
    Correct,
    Incorrect,
    /// No verdict marker was found in the final sentence region.
    Unparsed,
}

/// Ground truth for a judged response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldVerdict {
    Correct,
    Incorrect,
}

/// A critique's predicted verdict next to the ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub id: String,
    pub predicted: VerdictLabel,
    pub gold: GoldVerdict,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
    #[error("non-finite reward {value} for pair {pair_id}")]
    NonFiniteReward { pair_id: String, value: f64 },
    #[error("tie credit {0} is outside [0, 1]")]
    TieCreditOutOfRange(f64),
    #[error("verdict marker {marker:?} does not compile: {message}")]
    BadMarker { marker: String, message: String },
    #[error("run id {0:?} must be nonempty and use only [A-Za-z0-9._-]")]
    BadRunId(String),
    #[error("failed to write report {path}: {message}")]
    Write { path: String, message: String },
    #[error("failed to read report {path}: {message}")]
    Read { path: String, message: String },
}

/// Pairwise accuracy plus its per-category breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseAccuracy {
    /// Mean per-record score over all records.
    pub overall: f64,
    /// Mean per-record score within each category, keyed by category name.
    pub per_category: BTreeMap<String, f64>,
    pub n_records: usize,
    pub n_ties: usize,
    /// The credit each exact tie received (0 = ties count as failures).
    pub tie_credit: f64,
}

/// Grades reward comparisons: a record scores 1 when the chosen side got
/// the strictly higher reward, 0 when it got the lower one, and
/// `tie_credit` on an exact tie.
pub fn pairwise_accuracy(
    records: &[EvalRecord],
    tie_credit: f64,
) -> Result<PairwiseAccuracy, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    if !tie_credit.is_finite() || !(0.0..=1.0).contains(&tie_credit) {
        return Err(EvalError::TieCreditOutOfRange(tie_credit));
    }
    let mut total = 0.0;
    let mut n_ties = 0usize;
    let mut category_sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for record in records {
        for value in [record.reward_chosen, record.reward_rejected] {
            if !value.is_finite() {
                return Err(EvalError::NonFiniteReward {
                    pair_id: record.pair_id.clone(),
                    value,
                });
            }
        }
        let score = if record.reward_chosen > record.reward_rejected {
            1.0
        } else if record.reward_chosen < record.reward_rejected {
            0.0
        } else {
            n_ties += 1;
            tie_credit
        };
        total += score;
        let entry = category_sums.entry(&record.category).or_insert((0.0, 0));
        entry.0 += score;
        entry.1 += 1;
    }
    let per_category = category_sums
        .into_iter()
        .map(|(category, (sum, count))| (category.to_string(), sum / count as f64))
        .collect();
    Ok(PairwiseAccuracy {
        overall: total / records.len() as f64,
        per_category,
        n_records: records.len(),
        n_ties,
        tie_credit,
    })
}

/// Configurable verdict markers. Negative markers are matched before
/// positive ones so that negations win.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRules {
    pub incorrect_markers: Vec<String>,
    pub correct_markers: Vec<String>,
}

impl Default for VerdictRules {
    fn default() -> Self {
        Self {
            incorrect_markers: vec!["incorrect".to_string(), "not correct".to_string()],
            correct_markers: vec!["correct".to_string()],
        }
    }
}

impl VerdictRules {
    /// Compiles every marker into a whole-word, case-insensitive matcher.
    pub fn compile(&self) -> Result<VerdictMatcher, EvalError> {
        let build = |markers: &[String]| -> Result<Vec<Regex>, EvalError> {
            markers.iter().map(|m| marker_regex(m)).collect()
        };
        Ok(VerdictMatcher {
            incorrect: build(&self.incorrect_markers)?,
            correct: build(&self.correct_markers)?,
        })
    }
}

fn marker_regex(marker: &str) -> Result<Regex, EvalError> {
    let words: Vec<String> = marker.split_whitespace().map(regex::escape).collect();
    if words.is_empty() {
        return Err(EvalError::BadMarker {
            marker: marker.to_string(),
            message: "marker is empty".to_string(),
        });
    }
    let pattern = format!(r"\b{}\b", words.join(r"\s+"));
    RegexBuilder::new(&pattern)
        .case_insensitive(true)
        .build()
        .map_err(|e| EvalError::BadMarker {
            marker: marker.to_string(),
            message: e.to_string(),
        })
}

/// Compiled verdict markers ready to run over critiques.
#[derive(Debug)]
pub struct VerdictMatcher {
    incorrect: Vec<Regex>,
    correct: Vec<Regex>,
}

impl VerdictMatcher {
    /// Extracts the verdict from a critique's final sentence region.
    pub fn parse(&self, critique: &str) -> VerdictLabel {
        let region = final_sentence_region(critique);
        if self.incorrect.iter().any(|re| re.is_match(region)) {
            VerdictLabel::Incorrect
        } else if self.correct.iter().any(|re| re.is_match(region)) {
            VerdictLabel::Correct
        } else {
            VerdictLabel::Unparsed
        }
    }
}

/// The last sentence of the text: everything after the final sentence
/// terminator that still has content behind it.
fn final_sentence_region(text: &str) -> &str {
    let body = text.trim_end().trim_end_matches(['.', '!', '?']).trim_end();
    match body.rfind(['.', '!', '?']) {
        Some(i) => body[i + 1..].trim_start(),
        None => body.trim_start(),
    }
}

static DEFAULT_MATCHER: LazyLock<VerdictMatcher> = LazyLock::new(|| {
    VerdictRules::default()
        .compile()
        .expect("default verdict markers compile")
});

/// [`VerdictMatcher::parse`] with the default markers.
pub fn parse_verdict(critique: &str) -> VerdictLabel {
    DEFAULT_MATCHER.parse(critique)
}

/// Precision/recall/F1 over critique verdicts, with "incorrect" as the
/// positive class (finding flaws is the critique's job).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub unparsed: usize,
    /// True when a zero denominator forced precision, recall, or f1 to 0.
    pub degenerate: bool,
}

/// Scores verdicts against gold. An unparsed critique is a false negative
/// when gold is positive; when gold is negative it earns nothing (it is
/// counted in `unparsed` but not as a true negative).
pub fn critique_f1(records: &[VerdictRecord]) -> Result<F1Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut fn_, mut tn, mut unparsed) = (0usize, 0, 0, 0, 0usize);
    for record in records {
        match (record.predicted, record.gold) {
            (VerdictLabel::Incorrect, GoldVerdict::Incorrect) => tp += 1,
            (VerdictLabel::Incorrect, GoldVerdict::Correct) => fp += 1,
            (VerdictLabel::Correct, GoldVerdict::Incorrect) => fn_ += 1,
            (VerdictLabel::Correct, GoldVerdict::Correct) => tn += 1,
            (VerdictLabel::Unparsed, GoldVerdict::Incorrect) => {
                fn_ += 1;
                unparsed += 1;
            }
            (VerdictLabel::Unparsed, GoldVerdict::Correct) => unparsed += 1,
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| -> f64 {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Report {
        precision,
        recall,
        f1,
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_,
        true_negative: tn,
        unparsed,
        degenerate,
    })
}

/// A full evaluation report; either section may be absent when that metric
/// was not computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pairwise: Option<PairwiseAccuracy>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub critique: Option<F1Report>,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub report: PathBuf,
    pub by_category: PathBuf,
}

fn valid_run_id(run_id: &str) -> bool {
    !run_id.is_empty()
        && run_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Writes `<run-id>.report` (pretty JSON) and `<run-id>.by-category.tsv`
/// (header plus one sorted row per category) into `dir`. Identical reports
/// produce identical bytes.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<ReportPaths, EvalError> {
    if !valid_run_id(&report.run_id) {
        return Err(EvalError::BadRunId(report.run_id.clone()));
    }
    let paths = ReportPaths {
        report: dir.join(format!("{}.report", report.run_id)),
        by_category: dir.join(format!("{}.by-category.tsv", report.run_id)),
    };
    let json =
        serde_json::to_string_pretty(report).expect("report types serialize infallibly");
    let write = |path: &Path, bytes: &[u8]| -> Result<(), EvalError> {
        std::fs::write(path, bytes).map_err(|e| EvalError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    };
    write(&paths.report, format!("{json}\n").as_bytes())?;
    let mut tsv = String::from("category\taccuracy\n");
    if let Some(pairwise) = &report.pairwise {
        for (category, accuracy) in &pairwise.per_category {
            tsv.push_str(&format!("{category}\t{accuracy}\n"));
        }
    }
    write(&paths.by_category, tsv.as_bytes())?;
    Ok(paths)
}

/// Reads back a `<run-id>.report` file written by [`emit_report`].
pub fn load_report(path: &Path) -> Result<EvalReport, EvalError> {
    let raw = std::fs::read_to_string(path).map_err(|e| EvalError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&raw).map_err(|e| EvalError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads reward-comparison records, one JSON object per line.
pub fn load_eval_records(path: &Path) -> Result<Vec<EvalRecord>, DatasetError> {
    dataset::load_records(path, |_, _: &EvalRecord| Ok(()))
}

/// Loads verdict records, one JSON object per line.
pub fn load_verdict_records(path: &Path) -> Result<Vec<VerdictRecord>, DatasetError> {
    dataset::load_records(path, |_, _: &VerdictRecord| Ok(()))
}

/// Writes reward-comparison records, one JSON object per line.
pub fn write_eval_records(path: &Path, records: &[EvalRecord]) -> Result<(), DatasetError> {
    dataset::write_records(path, records)
}

/// Writes verdict records, one JSON object per line.
pub fn write_verdict_records(path: &Path, records: &[VerdictRecord]) -> Result<(), DatasetError> {
    dataset::write_records(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(pair_id: &str, category: &str, chosen: f64, rejected: f64) -> EvalRecord {
        EvalRecord {
            pair_id: pair_id.to_string(),
            category: category.to_string(),
            reward_chosen: chosen,
            reward_rejected: rejected,
        }
    }

    #[test]
    fn one_win_and_one_loss_average_to_a_half() {
        let records = [record("p1", "x", 1.0, 0.0), record("p2", "x", 0.0, 1.0)];
        let acc = pairwise_accuracy(&records, 0.0).expect("nonempty");
        assert_eq!(acc.overall, 0.5);
        assert_eq!(acc.n_ties, 0);
    }

    #[test]
    fn exact_ties_score_zero_by_default_and_the_credit_otherwise() {
        let records = [record("p1", "x", 0.3, 0.3), record("p2", "x", -1.0, -1.0)];
        let strict = pairwise_accuracy(&records, 0.0).expect("nonempty");
        assert_eq!(strict.overall, 0.0);
        assert_eq!(strict.n_ties, 2);
        let half = pairwise_accuracy(&records, 0.5).expect("nonempty");
        assert_eq!(half.overall, 0.5);
    }

    #[test]
    fn per_category_table_matches_the_worked_example() {
        let records = [
            record("p1", "a", 2.0, 1.0),
            record("p2", "a", 5.0, 0.0),
            record("p3", "b", 1.0, 0.0),
            record("p4", "b", 0.0, 1.0),
        ];
        let acc = pairwise_accuracy(&records, 0.0).expect("nonempty");
        assert_eq!(acc.overall, 0.75);
        assert_eq!(acc.per_category.get("a"), Some(&1.0));
        assert_eq!(acc.per_category.get("b"), Some(&0.5));
    }

    #[test]
    fn empty_input_and_bad_credit_are_errors() {
        assert!(matches!(pairwise_accuracy(&[], 0.0), Err(EvalError::Empty)));
        let records = [record("p1", "x", 1.0, 0.0)];
        assert!(matches!(
            pairwise_accuracy(&records, 1.5),
            Err(EvalError::TieCreditOutOfRange(_))
        ));
        let bad = [record("p1", "x", f64::NAN, 0.0)];
        assert!(matches!(
            pairwise_accuracy(&bad, 0.0),
            Err(EvalError::NonFiniteReward { .. })
        ));
    }

    #[test]
    fn verdict_markers_read_the_final_sentence() {
        assert_eq!(
            parse_verdict("The reasoning holds. Therefore the answer is correct."),
            VerdictLabel::Correct
        );
        assert_eq!(
            parse_verdict("Step two drops a sign. The solution is not correct."),
            VerdictLabel::Incorrect
        );
        assert_eq!(
            parse_verdict("The answer needs more detail."),
            VerdictLabel::Unparsed
        );
    }

    #[test]
    fn negation_wins_even_though_it_contains_the_positive_marker() {
        assert_eq!(parse_verdict("It is not correct."), VerdictLabel::Incorrect);
        assert_eq!(parse_verdict("It is Not   Correct"), VerdictLabel::Incorrect);
        assert_eq!(parse_verdict("It is incorrect."), VerdictLabel::Incorrect);
    }

    #[test]
    fn markers_match_whole_words_only() {
        assert_eq!(
            parse_verdict("The formula was incorrectly simplified."),
            VerdictLabel::Unparsed
        );
        assert_eq!(
            parse_verdict("Use correction tape."),
            VerdictLabel::Unparsed
        );
    }

    #[test]
    fn only_the_final_sentence_counts() {
        assert_eq!(
            parse_verdict("The answer is correct. But it lacks rigor."),
            VerdictLabel::Unparsed
        );
    }

    #[test]
    fn custom_markers_are_honored() {
        let matcher = VerdictRules {
            incorrect_markers: vec!["flawed".to_string()],
            correct_markers: vec!["sound".to_string()],
        }
        .compile()
        .expect("markers compile");
        assert_eq!(matcher.parse("The proof is sound."), VerdictLabel::Correct);
        assert_eq!(matcher.parse("The proof is flawed."), VerdictLabel::Incorrect);
        assert_eq!(matcher.parse("The proof is correct."), VerdictLabel::Unparsed);
    }

    fn verdict(id: &str, predicted: VerdictLabel, gold: GoldVerdict) -> VerdictRecord {
        VerdictRecord {
            id: id.to_string(),
            predicted,
            gold,
        }
    }

    #[test]
    fn perfect_predictions_on_a_mixed_set_score_one() {
        let records = [
            verdict("1", VerdictLabel::Incorrect, GoldVerdict::Incorrect),
            verdict("2", VerdictLabel::Correct, GoldVerdict::Correct),
            verdict("3", VerdictLabel::Incorrect, GoldVerdict::Incorrect),
        ];
        let report = critique_f1(&records).expect("nonempty");
        assert_eq!(report.f1, 1.0);
        assert!(!report.degenerate);
    }

    #[test]
    fn no_positive_predictions_with_gold_positives_is_degenerate_zero() {
        let records = [
            verdict("1", VerdictLabel::Correct, GoldVerdict::Incorrect),
            verdict("2", VerdictLabel::Correct, GoldVerdict::Correct),
        ];
        let report = critique_f1(&records).expect("nonempty");
        assert_eq!(report.precision, 0.0);
        assert_eq!(report.f1, 0.0);
        assert!(report.degenerate);
    }

    #[test]
    fn confusion_counts_match_the_worked_example() {
        let records = [
            verdict("1", VerdictLabel::Incorrect, GoldVerdict::Incorrect),
            verdict("2", VerdictLabel::Incorrect, GoldVerdict::Incorrect),
            verdict("3", VerdictLabel::Incorrect, GoldVerdict::Correct),
            verdict("4", VerdictLabel::Correct, GoldVerdict::Incorrect),
        ];
        let report = critique_f1(&records).expect("nonempty");
        assert_eq!(report.true_positive, 2);
        assert_eq!(report.false_positive, 1);
        assert_eq!(report.false_negative, 1);
        assert!((report.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unparsed_verdicts_are_misses_only_for_gold_positives() {
        let records = [
            verdict("1", VerdictLabel::Unparsed, GoldVerdict::Incorrect),
            verdict("2", VerdictLabel::Unparsed, GoldVerdict::Correct),
        ];
        let report = critique_f1(&records).expect("nonempty");
        assert_eq!(report.false_negative, 1);
        assert_eq!(report.true_negative, 0);
        assert_eq!(report.unparsed, 2);
    }

    fn sample_report() -> EvalReport {
        let records = [
            record("p1", "a", 2.0, 1.0),
            record("p2", "a", 5.0, 0.0),
            record("p3", "b", 1.0, 0.0),
            record("p4", "b", 0.0, 1.0),
        ];
        EvalReport {
            run_id: "sample-7".to_string(),
            pairwise: Some(pairwise_accuracy(&records, 0.0).expect("nonempty")),
            critique: Some(
                critique_f1(&[verdict("1", VerdictLabel::Incorrect, GoldVerdict::Incorrect)])
                    .expect("nonempty"),
            ),
        }
    }

    #[test]
    fn reports_are_byte_stable_and_round_trip() {
        let dir = tempfile::tempdir().expect("tempdir");
        let report = sample_report();
        let first = emit_report(&report, dir.path()).expect("report writes");
        let bytes_one = std::fs::read(&first.report).expect("readable");
        let tsv_one = std::fs::read(&first.by_category).expect("readable");
        let second = emit_report(&report, dir.path()).expect("report writes");
        assert_eq!(bytes_one, std::fs::read(&second.report).expect("readable"));
        assert_eq!(
            tsv_one,
            std::fs::read(&second.by_category).expect("readable")
        );
        let reloaded = load_report(&first.report).expect("report loads");
        assert_eq!(reloaded, report);
        let tsv = String::from_utf8(tsv_one).expect("utf8");
        assert_eq!(tsv, "category\taccuracy\na\t1\nb\t0.5\n");
    }

    #[test]
    fn report_without_pairwise_section_writes_a_header_only_table() {
        let dir = tempfile::tempdir().expect("tempdir");
        let report = EvalReport {
            run_id: "empty-0".to_string(),
            pairwise: None,
            critique: None,
        };
        let paths = emit_report(&report, dir.path()).expect("report writes");
        let tsv = std::fs::read_to_string(&paths.by_category).expect("readable");
        assert_eq!(tsv, "category\taccuracy\n");
        assert_eq!(load_report(&paths.report).expect("report loads"), report);
    }

    #[test]
    fn run_ids_with_path_separators_are_rejected() {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut report = sample_report();
        report.run_id = "../escape".to_string();
        assert!(matches!(
            emit_report(&report, dir.path()),
            Err(EvalError::BadRunId(_))
        ));
        report.run_id = String::new();
        assert!(matches!(
            emit_report(&report, dir.path()),
            Err(EvalError::BadRunId(_))
        ));
    }

    #[test]
    fn eval_and_verdict_records_round_trip_as_line_json() {
        let dir = tempfile::tempdir().expect("tempdir");
        let evals = vec![record("p1", "a", 1.5, -0.25)];
        let path = dir.path().join("records.jsonl");
        write_eval_records(&path, &evals).expect("writes");
        assert_eq!(load_eval_records(&path).expect("loads"), evals);
        let verdicts = vec![verdict("v1", VerdictLabel::Unparsed, GoldVerdict::Correct)];
        let vpath = dir.path().join("verdicts.jsonl");
        write_verdict_records(&vpath, &verdicts).expect("writes");
        assert_eq!(load_verdict_records(&vpath).expect("loads"), verdicts);
    }

    fn milli_reward() -> impl Strategy<Value = f64> {
        // Rewards on a 1e-3 grid: coarse enough that an affine transform
        // with slope >= 0.5 can never collapse two distinct values.
        (-100_000i64..100_000).prop_map(|v| v as f64 / 1000.0)
    }

    fn eval_records() -> impl Strategy<Value = Vec<EvalRecord>> {
        proptest::collection::vec(
            ("[a-c]", milli_reward(), milli_reward()).prop_map(|(cat, c, r)| EvalRecord {
                pair_id: "p".to_string(),
                category: cat,
                reward_chosen: c,
                reward_rejected: r,
            }),
            1..40,
        )
    }

    proptest! {
        /// Accuracy only compares rewards, so any strictly increasing
        /// transform applied to every reward leaves it unchanged.
        #[test]
        fn accuracy_is_invariant_under_increasing_transforms(
            records in eval_records(),
            slope in 0.5f64..3.0,
            intercept in -10.0f64..10.0,
            credit in prop_oneof![Just(0.0), Just(0.5)],
        ) {
            let transformed: Vec<EvalRecord> = records
                .iter()
                .map(|r| EvalRecord {
                    reward_chosen: slope * r.reward_chosen + intercept,
                    reward_rejected: slope * r.reward_rejected + intercept,
                    ..r.clone()
                })
                .collect();
            let base = pairwise_accuracy(&records, credit).expect("nonempty");
            let moved = pairwise_accuracy(&transformed, credit).expect("nonempty");
            prop_assert_eq!(base.overall.to_bits(), moved.overall.to_bits());
            prop_assert_eq!(base.per_category, moved.per_category);
            prop_assert_eq!(base.n_ties, moved.n_ties);
        }

        /// With no ties, swapping chosen and rejected flips every record's
        /// score, so the two accuracies sum to 1.
        #[test]
        fn swapped_records_complement_to_one_without_ties(records in eval_records()) {
            let untied: Vec<EvalRecord> = records
                .into_iter()
                .filter(|r| r.reward_chosen != r.reward_rejected)
                .collect();
            prop_assume!(!untied.is_empty());
            let swapped: Vec<EvalRecord> = untied
                .iter()
                .map(|r| EvalRecord {
                    reward_chosen: r.reward_rejected,
                    reward_rejected: r.reward_chosen,
                    ..r.clone()
                })
                .collect();
            let forward = pairwise_accuracy(&untied, 0.0).expect("nonempty");
            let backward = pairwise_accuracy(&swapped, 0.0).expect("nonempty");
            prop_assert!((forward.overall + backward.overall - 1.0).abs() < 1e-12);
        }

        /// The confusion counts are sums, so record order cannot matter.
        #[test]
        fn f1_is_invariant_under_record_rotation(
            labels in proptest::collection::vec((0u8..3, proptest::bool::ANY), 1..30),
            rotation in 0usize..30,
        ) {
            let records: Vec<VerdictRecord> = labels
                .iter()
                .enumerate()
                .map(|(i, (p, g))| VerdictRecord {
                    id: format!("v{i}"),
                    predicted: match p {
                        0 => VerdictLabel::Correct,
                        1 => VerdictLabel::Incorrect,
                        _ => VerdictLabel::Unparsed,
                    },
                    gold: if *g { GoldVerdict::Incorrect } else { GoldVerdict::Correct },
                })
                .collect();
            let mut rotated = records.clone();
            rotated.rotate_left(rotation % records.len());
            let a = critique_f1(&records).expect("nonempty");
            let b = critique_f1(&rotated).expect("nonempty");
            prop_assert_eq!(a, b);
        }
    }
}
