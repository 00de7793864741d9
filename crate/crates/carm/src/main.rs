//! Command-line front end: pipeline stages, training, scoring, serving,
//! evaluation, and a fully offline demonstration, as subcommands of one
//! binary. Logs go to standard error; data goes to files (or, for
//! `score`, to standard output as a single JSON document).
//!
//! Exit codes: 0 success, 2 for validation failures (bad flags, config,
//! or input files), 1 for runtime failures (backend, training, serving).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use carm::client::{CompletionBackend, HttpBackend, ScriptedBackend};
use carm::config::{self, BackendKind, RunConfig};
use carm::dataset::{
    load_critique_sets, load_pairs, load_refined, write_critique_sets, write_refined,
    CritiqueSet, PreferencePair, Side,
};
use carm::demo::run_demo;
use carm::eval::{
    critique_f1, emit_report, load_eval_records, load_verdict_records, pairwise_accuracy,
    EvalReport,
};
use carm::pipeline::{
    generate_candidates, instance_filter, refine_side, run_pipeline, FilterDecision,
};
use carm::prompts::TemplateStore;
use carm::scoring::{score_scaled, ScoreRequest};
use carm::service::serve_blocking;
use carm::toymodel::{ToyConfig, ToyModel};
use carm::RefinedExample;

#[derive(Parser)]
#[command(
    name = "carm",
    version,
    about = "Critique-augmented reward modeling: generate and filter critiques, train, score, serve, evaluate"
)]
struct Cli {
    /// Flat key=value config file (lower precedence than flags and env).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct PipelineArgs {
    /// Refinement mode: "summ" or "rank".
    #[arg(long, value_name = "MODE")]
    refinement: Option<String>,
    /// Candidate critiques sampled per response.
    #[arg(long, value_name = "N")]
    n_candidates: Option<usize>,
    /// Refined critiques kept per response.
    #[arg(long, value_name = "K")]
    top_k: Option<usize>,
}

#[derive(Args, Default)]
struct BackendArgs {
    /// Completion backend: "scripted" (offline fixture) or "remote".
    #[arg(long, value_name = "KIND")]
    backend: Option<String>,
    /// Fixture file for the scripted backend.
    #[arg(long, value_name = "PATH")]
    fixture: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample candidate critiques (with self-ratings) for every pair and side.
    Generate {
        /// Preference pairs, one JSON object per line.
        #[arg(long, value_name = "PATH")]
        pairs: PathBuf,
        /// Output path for the candidate critique sets.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Apply the consistency filter to generated critique sets.
    Filter {
        #[arg(long, value_name = "PATH")]
        pairs: PathBuf,
        /// Candidate critique sets produced by `generate`.
        #[arg(long, value_name = "PATH")]
        candidates: PathBuf,
        /// Output path for per-pair filter decisions.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Refine candidate critiques into final critiques (no filtering).
    Refine {
        #[arg(long, value_name = "PATH")]
        pairs: PathBuf,
        /// Candidate critique sets produced by `generate`.
        #[arg(long, value_name = "PATH")]
        candidates: PathBuf,
        /// Output path for refined examples.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Full pipeline: generate, filter, and refine in one pass.
    Pipeline {
        #[arg(long, value_name = "PATH")]
        pairs: PathBuf,
        /// Output path for refined examples.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Output path for run statistics (JSON).
        #[arg(long, value_name = "PATH")]
        stats_out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Train the toy reward model on refined examples.
    Train {
        /// Refined training examples.
        #[arg(long, value_name = "PATH")]
        refined: PathBuf,
        /// Optional refined held-out examples for per-epoch accuracy.
        #[arg(long, value_name = "PATH")]
        holdout: Option<PathBuf>,
        /// Where to write the trained checkpoint.
        #[arg(long, value_name = "PATH", default_value = "checkpoint.json")]
        checkpoint_out: PathBuf,
        /// Where to write per-step training metrics (JSON).
        #[arg(long, value_name = "PATH")]
        metrics_out: Option<PathBuf>,
    },
    /// Score a response: sample critiques, average the conditioned rewards.
    Score {
        /// Trained checkpoint to score with.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        response: String,
        /// Number of critiques to average over.
        #[arg(long)]
        m: Option<usize>,
        /// Critique sampling temperature.
        #[arg(long)]
        temperature: Option<f64>,
        /// Write the result here instead of standard output.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Serve scoring over HTTP until interrupted.
    Serve {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Address to bind, e.g. 127.0.0.1:8080.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Compute metrics from recorded rewards and/or critique verdicts.
    Eval {
        /// Reward comparison records, one JSON object per line.
        #[arg(long, value_name = "PATH")]
        records: Option<PathBuf>,
        /// Verdict records, one JSON object per line.
        #[arg(long, value_name = "PATH")]
        verdicts: Option<PathBuf>,
        /// Credit an exact reward tie receives (0 = ties fail).
        #[arg(long, default_value_t = 0.0)]
        tie_credit: f64,
        #[arg(long, default_value = "eval")]
        run_id: String,
        /// Directory for <run-id>.report and <run-id>.by-category.tsv.
        #[arg(long, value_name = "DIR", default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the fully offline end-to-end demonstration.
    Demo {
        /// Directory for every demo artifact.
        #[arg(long, value_name = "DIR", default_value = "demo-out")]
        out_dir: PathBuf,
    },
}

enum AppError {
    Validation(String),
    Runtime(String),
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 2,
            AppError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Validation(msg) | AppError::Runtime(msg) => msg,
        }
    }
}

fn validation(err: impl std::fmt::Display) -> AppError {
    AppError::Validation(err.to_string())
}

fn runtime(err: impl std::fmt::Display) -> AppError {
    AppError::Runtime(err.to_string())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {}", err.message());
        std::process::exit(err.exit_code());
    }
}

/// Resolves the four configuration layers. `extra_flags` holds the
/// subcommand flags the user actually passed, already keyed like config
/// entries.
fn resolve_config(
    config_path: Option<&Path>,
    seed: Option<u64>,
    extra_flags: Vec<(&'static str, String)>,
) -> Result<RunConfig, AppError> {
    let mut flags = extra_flags;
    if let Some(seed) = seed {
        flags.push(("seed", seed.to_string()));
    }
    let file_path = config_path
        .map(Path::to_path_buf)
        .or_else(|| std::env::var("CARM_CONFIG").ok().map(PathBuf::from));
    let file_values = match file_path {
        Some(path) => config::parse_config_file(&path).map_err(validation)?,
        None => BTreeMap::new(),
    };
    config::resolve(&flags, |var| std::env::var(var).ok(), &file_values).map_err(validation)
}

fn pipeline_flags(args: &PipelineArgs, backend: &BackendArgs) -> Vec<(&'static str, String)> {
    let mut flags = Vec::new();
    if let Some(v) = &args.refinement {
        flags.push(("refinement", v.clone()));
    }
    if let Some(v) = args.n_candidates {
        flags.push(("n-candidates", v.to_string()));
    }
    if let Some(v) = args.top_k {
        flags.push(("top-k", v.to_string()));
    }
    if let Some(v) = &backend.backend {
        flags.push(("backend", v.clone()));
    }
    if let Some(v) = &backend.fixture {
        flags.push(("fixture", v.display().to_string()));
    }
    flags
}

/// Builds the completion backend the resolved config asks for. A scripted
/// backend needs a fixture file; loading problems name the file.
fn build_backend(cfg: &RunConfig) -> Result<Box<dyn CompletionBackend>, AppError> {
    match cfg.backend {
        BackendKind::Scripted => {
            let path = cfg.fixture.as_ref().ok_or_else(|| {
                AppError::Validation(
                    "backend \"scripted\" requires --fixture (or the fixture config key)"
                        .to_string(),
                )
            })?;
            let backend = ScriptedBackend::from_fixture_file(path).map_err(validation)?;
            Ok(Box::new(backend))
        }
        BackendKind::Remote => {
            let backend_cfg = cfg.backend_config().map_err(validation)?;
            let backend = HttpBackend::new(backend_cfg).map_err(validation)?;
            Ok(Box::new(backend))
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<ToyModel, AppError> {
    ToyModel::load_checkpoint(path).map_err(validation)
}

#[derive(Default)]
struct SidePair {
    chosen: Option<CritiqueSet>,
    rejected: Option<CritiqueSet>,
}

/// Loads critique sets and indexes them by pair id; errors name the file.
fn sets_by_pair(path: &Path) -> Result<BTreeMap<String, SidePair>, AppError> {
    let sets = load_critique_sets(path).map_err(validation)?;
    let mut by_pair: BTreeMap<String, SidePair> = BTreeMap::new();
    for set in sets {
        let slot = by_pair.entry(set.pair_id.clone()).or_default();
        match set.side {
            Side::Chosen => slot.chosen = Some(set),
            Side::Rejected => slot.rejected = Some(set),
        }
    }
    Ok(by_pair)
}

fn side_sets<'a>(
    by_pair: &'a BTreeMap<String, SidePair>,
    pair: &PreferencePair,
    origin: &Path,
) -> Result<(&'a CritiqueSet, &'a CritiqueSet), AppError> {
    let both = by_pair.get(&pair.id).ok_or_else(|| {
        AppError::Validation(format!(
            "no critique sets for pair {} in {}",
            pair.id,
            origin.display()
        ))
    })?;
    let pick = |set: &'a Option<CritiqueSet>, side: Side| {
        set.as_ref().ok_or_else(|| {
            AppError::Validation(format!(
                "no {} critique set for pair {} in {}",
                side.as_str(),
                pair.id,
                origin.display()
            ))
        })
    };
    Ok((
        pick(&both.chosen, Side::Chosen)?,
        pick(&both.rejected, Side::Rejected)?,
    ))
}

#[derive(Serialize)]
struct FilterRecord {
    pair_id: String,
    #[serde(flatten)]
    decision: FilterDecision,
}

fn run(cli: Cli) -> Result<(), AppError> {
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Generate {
            pairs,
            out,
            pipeline,
            backend,
        } => {
            let cfg = resolve_config(config_path, cli.seed, pipeline_flags(&pipeline, &backend))?;
            let pipeline_cfg = cfg.pipeline_config();
            pipeline_cfg.validate().map_err(validation)?;
            let pair_list = load_pairs(&pairs).map_err(validation)?;
            let backend = build_backend(&cfg)?;
            let templates = TemplateStore::builtin();
            let mut sets = Vec::with_capacity(pair_list.len() * 2);
            for pair in &pair_list {
                for side in [Side::Chosen, Side::Rejected] {
                    sets.push(
                        generate_candidates(backend.as_ref(), &templates, pair, side, &pipeline_cfg)
                            .map_err(runtime)?,
                    );
                }
            }
            write_critique_sets(&out, &sets).map_err(runtime)?;
            log::info!("wrote {} critique sets to {}", sets.len(), out.display());
        }
        Command::Filter {
            pairs,
            candidates,
            out,
        } => {
            let cfg = resolve_config(config_path, cli.seed, Vec::new())?;
            let pipeline_cfg = cfg.pipeline_config();
            let pair_list = load_pairs(&pairs).map_err(validation)?;
            let by_pair = sets_by_pair(&candidates)?;
            let mut records = Vec::with_capacity(pair_list.len());
            let mut kept = 0usize;
            for pair in &pair_list {
                let (chosen, rejected) = side_sets(&by_pair, pair, &candidates)?;
                let decision = instance_filter(chosen, rejected, &pipeline_cfg);
                kept += decision.keep as usize;
                records.push(FilterRecord {
                    pair_id: pair.id.clone(),
                    decision,
                });
            }
            let mut body = String::new();
            for record in &records {
                let line = serde_json::to_string(record)
                    .expect("filter decisions serialize infallibly");
                body.push_str(&line);
                body.push('\n');
            }
            std::fs::write(&out, body).map_err(runtime)?;
            log::info!(
                "filter kept {kept}/{} pairs; decisions in {}",
                pair_list.len(),
                out.display()
            );
        }
        Command::Refine {
            pairs,
            candidates,
            out,
            pipeline,
            backend,
        } => {
            let cfg = resolve_config(config_path, cli.seed, pipeline_flags(&pipeline, &backend))?;
            let pipeline_cfg = cfg.pipeline_config();
            pipeline_cfg.validate().map_err(validation)?;
            let pair_list = load_pairs(&pairs).map_err(validation)?;
            let by_pair = sets_by_pair(&candidates)?;
            let backend = build_backend(&cfg)?;
            let templates = TemplateStore::builtin();
            let mut refined = Vec::with_capacity(pair_list.len());
            for pair in &pair_list {
                let (chosen, rejected) = side_sets(&by_pair, pair, &candidates)?;
                let critiques_chosen =
                    refine_side(backend.as_ref(), &templates, pair, Side::Chosen, chosen, &pipeline_cfg)
                        .map_err(runtime)?;
                let critiques_rejected = refine_side(
                    backend.as_ref(),
                    &templates,
                    pair,
                    Side::Rejected,
                    rejected,
                    &pipeline_cfg,
                )
                .map_err(runtime)?;
                refined.push(RefinedExample {
                    pair: pair.clone(),
                    critiques_chosen,
                    critiques_rejected,
                    refinement: pipeline_cfg.refinement,
                });
            }
            write_refined(&out, &refined).map_err(runtime)?;
            log::info!("wrote {} refined examples to {}", refined.len(), out.display());
        }
        Command::Pipeline {
            pairs,
            out,
            stats_out,
            pipeline,
            backend,
        } => {
            let cfg = resolve_config(config_path, cli.seed, pipeline_flags(&pipeline, &backend))?;
            let pipeline_cfg = cfg.pipeline_config();
            pipeline_cfg.validate().map_err(validation)?;
            let pair_list = load_pairs(&pairs).map_err(validation)?;
            let backend = build_backend(&cfg)?;
            let templates = TemplateStore::builtin();
            let (refined, stats) =
                run_pipeline(backend.as_ref(), &templates, &pair_list, &pipeline_cfg)
                    .map_err(runtime)?;
            write_refined(&out, &refined).map_err(runtime)?;
            if let Some(stats_path) = &stats_out {
                let json = serde_json::to_string_pretty(&stats)
                    .expect("stats serialize infallibly");
                std::fs::write(stats_path, format!("{json}\n")).map_err(runtime)?;
            }
            log::info!(
                "pipeline kept {}/{} pairs ({} failures); refined examples in {}",
                stats.kept,
                stats.processed,
                stats.failures.len(),
                out.display()
            );
        }
        Command::Train {
            refined,
            holdout,
            checkpoint_out,
            metrics_out,
        } => {
            let cfg = resolve_config(config_path, cli.seed, Vec::new())?;
            let train_set = load_refined(&refined).map_err(validation)?;
            let held_out = match &holdout {
                Some(path) => load_refined(path).map_err(validation)?,
                None => Vec::new(),
            };
            let toy_cfg = ToyConfig::toy_profile(cfg.seed);
            let (model, metrics) =
                ToyModel::train_from_scratch(toy_cfg, &train_set, &held_out).map_err(runtime)?;
            model.save_checkpoint(&checkpoint_out).map_err(runtime)?;
            if let Some(metrics_path) = &metrics_out {
                let json = serde_json::to_string_pretty(&metrics)
                    .expect("metrics serialize infallibly");
                std::fs::write(metrics_path, format!("{json}\n")).map_err(runtime)?;
            }
            log::info!(
                "trained on {} examples for {} steps; final holdout accuracy {:?}; checkpoint in {}",
                train_set.len(),
                metrics.steps.len(),
                metrics.epoch_accuracy.last().copied().flatten(),
                checkpoint_out.display()
            );
        }
        Command::Score {
            checkpoint,
            prompt,
            response,
            m,
            temperature,
            out,
        } => {
            let mut flags = Vec::new();
            if let Some(v) = m {
                flags.push(("m", v.to_string()));
            }
            if let Some(v) = temperature {
                flags.push(("temperature", v.to_string()));
            }
            let cfg = resolve_config(config_path, cli.seed, flags)?;
            let model = load_checkpoint(&checkpoint)?;
            let request = ScoreRequest {
                prompt,
                response,
                m: cfg.m,
                temperature: cfg.temperature,
                seed: cfg.seed,
            };
            let result = score_scaled(&model, &request).map_err(|err| match err {
                carm::scoring::ScoringError::Validation { .. } => validation(err),
                other => runtime(other),
            })?;
            let json =
                serde_json::to_string_pretty(&result).expect("score results serialize infallibly");
            match &out {
                Some(path) => std::fs::write(path, format!("{json}\n")).map_err(runtime)?,
                None => println!("{json}"),
            }
            log::info!(
                "scored with m={}: mean reward {:.6}",
                request.m,
                result.reward
            );
        }
        Command::Serve { checkpoint, bind } => {
            let mut flags = Vec::new();
            if let Some(v) = bind {
                flags.push(("bind", v));
            }
            let cfg = resolve_config(config_path, cli.seed, flags)?;
            let model = load_checkpoint(&checkpoint)?;
            serve_blocking(&cfg.bind, model).map_err(runtime)?;
        }
        Command::Eval {
            records,
            verdicts,
            tie_credit,
            run_id,
            out_dir,
        } => {
            if records.is_none() && verdicts.is_none() {
                return Err(AppError::Validation(
                    "eval needs --records and/or --verdicts".to_string(),
                ));
            }
            let pairwise = match &records {
                Some(path) => {
                    let list = load_eval_records(path).map_err(validation)?;
                    Some(pairwise_accuracy(&list, tie_credit).map_err(validation)?)
                }
                None => None,
            };
            let critique = match &verdicts {
                Some(path) => {
                    let list = load_verdict_records(path).map_err(validation)?;
                    Some(critique_f1(&list).map_err(validation)?)
                }
                None => None,
            };
            let report = EvalReport {
                run_id,
                pairwise,
                critique,
            };
            std::fs::create_dir_all(&out_dir).map_err(runtime)?;
            let paths = emit_report(&report, &out_dir).map_err(|err| match err {
                carm::eval::EvalError::BadRunId(_) => validation(err),
                other => runtime(other),
            })?;
            if let Some(p) = &report.pairwise {
                log::info!("pairwise accuracy {:.4} over {} records", p.overall, p.n_records);
            }
            if let Some(f) = &report.critique {
                log::info!("critique F1 {:.4} (precision {:.4}, recall {:.4})", f.f1, f.precision, f.recall);
            }
            log::info!("report written to {}", paths.report.display());
        }
        Command::Demo { out_dir } => {
            let cfg = resolve_config(config_path, cli.seed, Vec::new())?;
            let summary = run_demo(cfg.seed, &out_dir).map_err(runtime)?;
            log::info!(
                "demo complete: artifacts in {}, model checksum {}",
                out_dir.display(),
                summary.model_checksum
            );
        }
    }
    Ok(())
}
