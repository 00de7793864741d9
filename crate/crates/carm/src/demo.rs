//! Self-contained, fully offline end-to-end demonstration.
//!
//! One seeded run generates a synthetic preference corpus, scripts a judge
//! fixture for it, runs the critique pipeline in both refinement modes,
//! trains the toy reward model on the ranked output, scores a sample
//! response, evaluates pairwise accuracy and critique-verdict F1, and
//! writes every artifact — datasets, fixture, refined sets, checkpoint,
//! metrics, scores, reports, and a summary — into one output directory.
//!
//! Everything downstream of the seed is deterministic: running the demo
//! twice with the same seed produces byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::client::{CompletionBackend, ScriptedBackend};
use crate::dataset::{
    synth_corpus, write_gold, write_pairs, write_refined, PreferencePair, RefinedExample, Side,
    SynthConfig,
};
use crate::eval::{
    critique_f1, emit_report, pairwise_accuracy, parse_verdict, write_eval_records,
    write_verdict_records, EvalRecord, EvalReport, GoldVerdict, VerdictRecord,
};
use crate::pipeline::{
    generate_candidates, refine_side, run_pipeline, PipelineConfig, PipelineStats,
};
use crate::prompts::TemplateStore;
use crate::scoring::{score_scaled, ScoreRequest};
use crate::synthjudge::{build_fixture, JudgeProfile};
use crate::toymodel::{ToyConfig, ToyModel};
use crate::util::derive_seed;
use crate::RefinementMode;

/// Training-set size for the demo corpus.
pub const DEMO_TRAIN_PAIRS: usize = 96;

/// Held-out set size for the demo corpus.
pub const DEMO_EVAL_PAIRS: usize = 32;

/// Marker-frequency gap between chosen and rejected responses.
pub const DEMO_SIGNAL: f64 = 0.6;

/// Critiques every pair without the consistency filter. Held-out pairs go
/// through this path: they need critiques for scoring no matter how much
/// the judge's ratings agree.
pub fn annotate_pairs(
    backend: &dyn CompletionBackend,
    templates: &TemplateStore,
    pairs: &[PreferencePair],
    cfg: &PipelineConfig,
) -> Result<Vec<RefinedExample>, crate::pipeline::PipelineError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let set_chosen = generate_candidates(backend, templates, pair, Side::Chosen, cfg)?;
        let set_rejected = generate_candidates(backend, templates, pair, Side::Rejected, cfg)?;
        let critiques_chosen = refine_side(backend, templates, pair, Side::Chosen, &set_chosen, cfg)?;
        let critiques_rejected =
            refine_side(backend, templates, pair, Side::Rejected, &set_rejected, cfg)?;
        out.push(RefinedExample {
            pair: pair.clone(),
            critiques_chosen,
            critiques_rejected,
            refinement: cfg.refinement,
        });
    }
    Ok(out)
}

/// Headline numbers from one demo run, also written to
/// `demo_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub rank_stats: PipelineStats,
    pub summ_stats: PipelineStats,
    /// Number of filtered, refined examples the model trained on.
    pub trained_on: usize,
    /// Held-out accuracy after the final training epoch.
    pub final_holdout_accuracy: Option<f64>,
    /// Pairwise accuracy of the trained model on the held-out pairs.
    pub eval_accuracy: f64,
    /// Verdict F1 of the summarized critiques against the hidden gold.
    pub critique_f1: f64,
    /// Mean reward of the scored sample response.
    pub sample_reward: f64,
    pub model_checksum: String,
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("demo artifacts serialize infallibly");
    std::fs::write(path, format!("{json}\n"))
        .with_context(|| format!("failed to write {}", path.display()))
}

/// Runs the whole offline demonstration into `out_dir` (created if
/// needed). Returns the summary that was written to `demo_summary.json`.
pub fn run_demo(seed: u64, out_dir: &Path) -> Result<DemoSummary> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("failed to create {}", out_dir.display()))?;
    let templates = TemplateStore::builtin();

    // One corpus, split train/held-out, so ids and prompts never collide.
    let corpus = synth_corpus(&SynthConfig {
        n_pairs: DEMO_TRAIN_PAIRS + DEMO_EVAL_PAIRS,
        signal_strength: DEMO_SIGNAL,
        seed,
    })?;
    let (train_pairs, eval_pairs) = corpus.pairs.split_at(DEMO_TRAIN_PAIRS);
    let (train_gold, eval_gold) = corpus.gold.split_at(DEMO_TRAIN_PAIRS);
    write_pairs(&out_dir.join("train_pairs.jsonl"), train_pairs)?;
    write_pairs(&out_dir.join("eval_pairs.jsonl"), eval_pairs)?;
    write_gold(&out_dir.join("train_gold.jsonl"), train_gold)?;
    write_gold(&out_dir.join("eval_gold.jsonl"), eval_gold)?;

    // Script the judge once for every prompt either refinement mode will
    // issue, over both splits.
    let base_cfg = PipelineConfig {
        seed: derive_seed(seed, &["demo-pipeline"]),
        ..PipelineConfig::default()
    };
    let profile = JudgeProfile {
        seed: derive_seed(seed, &["demo-judge"]),
        ..JudgeProfile::default()
    };
    let fixture = build_fixture(&corpus.pairs, &corpus.gold, &base_cfg, &templates, &profile)?;
    fixture.save(&out_dir.join("fixture.json"))?;

    // Filter + refine the training split in both modes. Each run drains
    // its own backend; the fixture itself is reusable.
    let rank_cfg = PipelineConfig {
        refinement: RefinementMode::Rank,
        ..base_cfg.clone()
    };
    let summ_cfg = PipelineConfig {
        refinement: RefinementMode::Summ,
        ..base_cfg.clone()
    };
    let rank_backend = ScriptedBackend::from_fixture(&fixture);
    let (refined_rank, rank_stats) =
        run_pipeline(&rank_backend, &templates, train_pairs, &rank_cfg)?;
    write_refined(&out_dir.join("refined_rank.jsonl"), &refined_rank)?;
    let summ_backend = ScriptedBackend::from_fixture(&fixture);
    let (refined_summ, summ_stats) =
        run_pipeline(&summ_backend, &templates, train_pairs, &summ_cfg)?;
    write_refined(&out_dir.join("refined_summ.jsonl"), &refined_summ)?;
    write_pretty(
        &out_dir.join("pipeline_stats.json"),
        &serde_json::json!({ "rank": rank_stats, "summ": summ_stats }),
    )?;
    if refined_rank.is_empty() {
        bail!("the filter kept no training pairs; rerun with another seed");
    }

    // Held-out pairs are critiqued unfiltered, then used as the training
    // holdout and the evaluation set.
    let eval_backend = ScriptedBackend::from_fixture(&fixture);
    let eval_examples = annotate_pairs(&eval_backend, &templates, eval_pairs, &rank_cfg)?;
    write_refined(&out_dir.join("eval_refined.jsonl"), &eval_examples)?;

    let toy_cfg = ToyConfig::toy_profile(derive_seed(seed, &["demo-model"]));
    let (model, metrics) = ToyModel::train_from_scratch(toy_cfg, &refined_rank, &eval_examples)?;
    model.save_checkpoint(&out_dir.join("checkpoint.json"))?;
    write_pretty(&out_dir.join("train_metrics.json"), &metrics)?;

    // Score one sample response with inference-time scaling.
    let sample = score_scaled(
        &model,
        &ScoreRequest {
            prompt: eval_pairs[0].prompt.clone(),
            response: eval_pairs[0].chosen.clone(),
            m: 4,
            temperature: 0.95,
            seed: derive_seed(seed, &["demo-score"]),
        },
    )?;
    write_pretty(&out_dir.join("scores.json"), &sample)?;

    // Pairwise accuracy on held-out pairs, each side scored with its first
    // refined critique.
    let mut records = Vec::with_capacity(eval_examples.len());
    for example in &eval_examples {
        let reward_chosen = model.reward_for_text(
            &example.pair.prompt,
            &example.pair.chosen,
            &example.critiques_chosen[0],
        )?;
        let reward_rejected = model.reward_for_text(
            &example.pair.prompt,
            &example.pair.rejected,
            &example.critiques_rejected[0],
        )?;
        records.push(EvalRecord {
            pair_id: example.pair.id.clone(),
            category: example.pair.domain.as_str().to_string(),
            reward_chosen,
            reward_rejected,
        });
    }
    write_eval_records(&out_dir.join("eval_records.jsonl"), &records)?;
    let pairwise = pairwise_accuracy(&records, 0.0)?;

    // Verdict F1 of the summarized training critiques against the hidden
    // gold markers.
    let gold_by_id: BTreeMap<&str, (bool, bool)> = train_gold
        .iter()
        .map(|label| (label.id.as_str(), (label.chosen_marker, label.rejected_marker)))
        .collect();
    let mut verdicts = Vec::with_capacity(refined_summ.len() * 2);
    for example in &refined_summ {
        let (chosen_marker, rejected_marker) = gold_by_id[example.pair.id.as_str()];
        for (side, critiques) in [
            (Side::Chosen, &example.critiques_chosen),
            (Side::Rejected, &example.critiques_rejected),
        ] {
            let marker = match side {
                Side::Chosen => chosen_marker,
                Side::Rejected => rejected_marker,
            };
            verdicts.push(VerdictRecord {
                id: format!("{}-{}", example.pair.id, side.as_str()),
                predicted: parse_verdict(&critiques[0]),
                gold: if marker {
                    GoldVerdict::Correct
                } else {
                    GoldVerdict::Incorrect
                },
            });
        }
    }
    write_verdict_records(&out_dir.join("verdicts.jsonl"), &verdicts)?;
    let f1 = critique_f1(&verdicts)?;

    let report = EvalReport {
        run_id: format!("demo-{seed}"),
        pairwise: Some(pairwise.clone()),
        critique: Some(f1.clone()),
    };
    emit_report(&report, out_dir)?;

    let summary = DemoSummary {
        seed,
        train_pairs: DEMO_TRAIN_PAIRS,
        eval_pairs: DEMO_EVAL_PAIRS,
        rank_stats,
        summ_stats,
        trained_on: refined_rank.len(),
        final_holdout_accuracy: metrics.epoch_accuracy.last().copied().flatten(),
        eval_accuracy: pairwise.overall,
        critique_f1: f1.f1,
        sample_reward: sample.reward,
        model_checksum: model.checksum(),
    };
    write_pretty(&out_dir.join("demo_summary.json"), &summary)?;
    log::info!(
        "demo seed {seed}: kept {}/{} pairs, eval accuracy {:.3}, critique F1 {:.3}",
        summary.trained_on,
        summary.train_pairs,
        summary.eval_accuracy,
        summary.critique_f1,
    );
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_writes_every_artifact_and_reruns_byte_identically() {
        let dir_a = tempfile::tempdir().expect("tempdir");
        let dir_b = tempfile::tempdir().expect("tempdir");
        let summary_a = run_demo(3, dir_a.path()).expect("demo runs");
        let summary_b = run_demo(3, dir_b.path()).expect("demo runs");
        assert_eq!(summary_a, summary_b);
        assert!(summary_a.trained_on > 0);
        assert_eq!(
            summary_a.rank_stats.processed,
            DEMO_TRAIN_PAIRS,
            "every training pair should be processed"
        );

        let files = [
            "train_pairs.jsonl",
            "eval_pairs.jsonl",
            "train_gold.jsonl",
            "eval_gold.jsonl",
            "fixture.json",
            "refined_rank.jsonl",
            "refined_summ.jsonl",
            "eval_refined.jsonl",
            "pipeline_stats.json",
            "checkpoint.json",
            "train_metrics.json",
            "scores.json",
            "eval_records.jsonl",
            "verdicts.jsonl",
            "demo-3.report",
            "demo-3.by-category.tsv",
            "demo_summary.json",
        ];
        for name in files {
            let a = std::fs::read(dir_a.path().join(name))
                .unwrap_or_else(|e| panic!("missing artifact {name}: {e}"));
            let b = std::fs::read(dir_b.path().join(name))
                .unwrap_or_else(|e| panic!("missing artifact {name}: {e}"));
            assert_eq!(a, b, "artifact {name} differs between identical runs");
        }
    }

    #[test]
    fn different_seeds_change_the_artifacts() {
        let dir_a = tempfile::tempdir().expect("tempdir");
        let dir_b = tempfile::tempdir().expect("tempdir");
        let summary_a = run_demo(1, dir_a.path()).expect("demo runs");
        let summary_b = run_demo(2, dir_b.path()).expect("demo runs");
        assert_ne!(summary_a.model_checksum, summary_b.model_checksum);
    }
}
