//! Process-level tests of the `carm` binary: exit codes, the four-layer
//! configuration precedence, output formats, and agreement between the
//! staged subcommands and the one-shot pipeline.
//!
//! Every child process starts from a cleared environment so ambient
//! `CARM_*` variables cannot leak into a test.

use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use carm::dataset::{synth_corpus, write_pairs, write_refined, SynthConfig};
use carm::pipeline::PipelineConfig;
use carm::prompts::TemplateStore;
use carm::scoring::ScoreResult;
use carm::synthjudge::{build_fixture, JudgeProfile};
use carm::toymodel::{ToyConfig, ToyModel, ToyParams, Vocab};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_carm"));
    cmd.env_clear();
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary launches")
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_exit(output: &Output, want: i32, context: &str) {
    assert_eq!(
        output.status.code(),
        Some(want),
        "{context}: expected exit code {want}, got {:?}; stderr:\n{}",
        output.status.code(),
        stderr_of(output)
    );
}

/// Saves a small trained-shape checkpoint the `score`/`serve` commands can
/// load. The weights are a deterministic random init; scoring only needs a
/// well-formed model, not an accurate one.
fn write_checkpoint(path: &Path) {
    let mut cfg = ToyConfig::toy_profile(77);
    let vocab = Vocab::build(["alpha beta gamma delta epsilon zeta"]);
    cfg.vocab_size = vocab.len();
    let params = ToyParams::init(&cfg, 77);
    let model = ToyModel::new(cfg, vocab, params).expect("valid model");
    model.save_checkpoint(path).expect("checkpoint saves");
}

fn path_str(path: &Path) -> &str {
    path.to_str().expect("temp paths are valid UTF-8")
}

// --- configuration precedence -------------------------------------------

#[test]
fn config_layers_flag_env_file_then_default() {
    let dir = tempfile::tempdir().expect("tempdir");
    let ckpt = dir.path().join("model.json");
    write_checkpoint(&ckpt);
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# test config\nm = 2\n").expect("config writes");

    // `m` is observable from the outside: the score result carries one
    // critique and one reward per sample.
    let critiques_with = |prepare: &dyn Fn(&mut Command)| -> usize {
        let mut cmd = bin();
        cmd.args([
            "score",
            "--checkpoint",
            path_str(&ckpt),
            "--prompt",
            "alpha beta",
            "--response",
            "gamma delta",
            "--seed",
            "9",
        ]);
        prepare(&mut cmd);
        let output = run(&mut cmd);
        assert_exit(&output, 0, "score");
        let result: ScoreResult =
            serde_json::from_slice(&output.stdout).expect("stdout is one score document");
        assert_eq!(result.critiques.len(), result.per_critique_rewards.len());
        result.critiques.len()
    };

    let conf_arg = path_str(&conf).to_string();

    // Flag beats environment beats file; with a key set at every layer the
    // flag's value is the one that shows up.
    let all_layers = critiques_with(&|cmd| {
        cmd.args(["--config", &conf_arg, "--m", "4"]).env("CARM_M", "3");
    });
    assert_eq!(all_layers, 4, "flag layer should win over env and file");

    let env_and_file = critiques_with(&|cmd| {
        cmd.args(["--config", &conf_arg]).env("CARM_M", "3");
    });
    assert_eq!(env_and_file, 3, "env layer should win over the file");

    let file_only = critiques_with(&|cmd| {
        cmd.args(["--config", &conf_arg]);
    });
    assert_eq!(file_only, 2, "file layer should win over the default");

    let nothing = critiques_with(&|_| {});
    assert_eq!(nothing, 1, "default m should be 1");

    // CARM_CONFIG names the config file when --config is absent.
    let discovered = critiques_with(&|cmd| {
        cmd.env("CARM_CONFIG", &conf_arg);
    });
    assert_eq!(discovered, 2, "CARM_CONFIG should locate the config file");
}

// --- exit codes ---------------------------------------------------------

#[test]
fn validation_problems_exit_2_and_name_the_cause() {
    let dir = tempfile::tempdir().expect("tempdir");
    let missing = dir.path().join("missing.ldjson");

    // A nonexistent input file is a validation failure naming the path.
    let output = run(bin().args([
        "filter",
        "--pairs",
        path_str(&missing),
        "--candidates",
        path_str(&missing),
        "--out",
        path_str(&dir.path().join("out.ldjson")),
    ]));
    assert_exit(&output, 2, "filter with missing pairs");
    assert!(
        stderr_of(&output).contains("missing.ldjson"),
        "error should name the missing file: {}",
        stderr_of(&output)
    );

    // The scripted backend refuses to run without a fixture.
    let corpus = synth_corpus(&SynthConfig {
        n_pairs: 1,
        signal_strength: 1.0,
        seed: 3,
    })
    .expect("corpus");
    let pairs_path = dir.path().join("pairs.ldjson");
    write_pairs(&pairs_path, &corpus.pairs).expect("pairs write");
    let output = run(bin().args([
        "generate",
        "--pairs",
        path_str(&pairs_path),
        "--out",
        path_str(&dir.path().join("cand.ldjson")),
    ]));
    assert_exit(&output, 2, "generate without a fixture");
    assert!(
        stderr_of(&output).contains("requires --fixture"),
        "error should point at the fixture flag: {}",
        stderr_of(&output)
    );

    // A bad flag value names the key and the layer it came from.
    let output = run(bin().args([
        "score",
        "--checkpoint",
        path_str(&missing),
        "--prompt",
        "p",
        "--response",
        "r",
        "--m",
        "0",
    ]));
    assert_exit(&output, 2, "score --m 0");
    assert!(
        stderr_of(&output).contains("for m (from flag --m)"),
        "error should name the key and layer: {}",
        stderr_of(&output)
    );

    // Unknown config-file keys are rejected before anything runs.
    let bad_conf = dir.path().join("bad.conf");
    std::fs::write(&bad_conf, "volume = 11\n").expect("config writes");
    let demo_dir = dir.path().join("demo-out");
    let output = run(bin().args([
        "demo",
        "--config",
        path_str(&bad_conf),
        "--out-dir",
        path_str(&demo_dir),
    ]));
    assert_exit(&output, 2, "demo with unknown config key");
    assert!(
        stderr_of(&output).contains("unknown config key \"volume\""),
        "error should name the unknown key: {}",
        stderr_of(&output)
    );
    assert!(!demo_dir.exists(), "demo must not write anything on a config error");

    // An enumerated key rejects values outside its enumeration.
    let output = run(bin().args([
        "pipeline",
        "--pairs",
        path_str(&pairs_path),
        "--out",
        path_str(&dir.path().join("ref.ldjson")),
        "--refinement",
        "best",
    ]));
    assert_exit(&output, 2, "pipeline --refinement best");
    assert!(
        stderr_of(&output).contains("expected \"summ\" or \"rank\""),
        "error should list the accepted modes: {}",
        stderr_of(&output)
    );

    // Eval with no inputs at all cannot compute anything.
    let output = run(bin().args(["eval", "--out-dir", path_str(dir.path())]));
    assert_exit(&output, 2, "eval with no inputs");
    assert!(
        stderr_of(&output).contains("--records and/or --verdicts"),
        "error should name the missing inputs: {}",
        stderr_of(&output)
    );

    // Unknown flags are usage errors (clap's canonical exit code is 2).
    let output = run(bin().args(["score", "--frobnicate"]));
    assert_exit(&output, 2, "unknown flag");
}

#[test]
fn runtime_problems_exit_1() {
    let dir = tempfile::tempdir().expect("tempdir");

    // Training on an empty refined file resolves and loads fine but fails
    // at run time.
    let empty = dir.path().join("empty.ldjson");
    write_refined(&empty, &[]).expect("empty refined file writes");
    let output = run(bin()
        .current_dir(dir.path())
        .args(["train", "--refined", path_str(&empty)]));
    assert_exit(&output, 1, "train on empty dataset");
    assert!(
        stderr_of(&output).contains("training dataset is empty"),
        "error should say the dataset is empty: {}",
        stderr_of(&output)
    );

    // A fixture that covers only some of the pairs makes the backend miss
    // mid-run: the inputs were valid, the run was not.
    let corpus = synth_corpus(&SynthConfig {
        n_pairs: 2,
        signal_strength: 1.0,
        seed: 5,
    })
    .expect("corpus");
    let pairs_path = dir.path().join("pairs.ldjson");
    write_pairs(&pairs_path, &corpus.pairs).expect("pairs write");
    let cfg = PipelineConfig {
        seed: 5,
        ..PipelineConfig::default()
    };
    let fixture = build_fixture(
        &corpus.pairs[..1],
        &corpus.gold[..1],
        &cfg,
        &TemplateStore::builtin(),
        &JudgeProfile::default(),
    )
    .expect("fixture builds");
    let fixture_path = dir.path().join("partial.fixture.json");
    fixture.save(&fixture_path).expect("fixture saves");

    let output = run(bin().args([
        "generate",
        "--pairs",
        path_str(&pairs_path),
        "--out",
        path_str(&dir.path().join("cand.ldjson")),
        "--fixture",
        path_str(&fixture_path),
        "--seed",
        "5",
    ]));
    assert_exit(&output, 1, "generate past the end of the fixture");
    assert!(
        stderr_of(&output).contains("no scripted responses"),
        "error should describe the fixture miss: {}",
        stderr_of(&output)
    );
}

// --- score output -------------------------------------------------------

#[test]
fn score_writes_the_result_file_and_respects_m() {
    let dir = tempfile::tempdir().expect("tempdir");
    let ckpt = dir.path().join("model.json");
    write_checkpoint(&ckpt);
    let out = dir.path().join("result.json");

    let score = |out_path: &Path| -> Output {
        run(bin().args([
            "score",
            "--checkpoint",
            path_str(&ckpt),
            "--prompt",
            "alpha",
            "--response",
            "beta gamma",
            "--m",
            "32",
            "--temperature",
            "0.95",
            "--seed",
            "5",
            "--out",
            path_str(out_path),
        ]))
    };

    let output = score(&out);
    assert_exit(&output, 0, "score --out");
    assert!(
        output.stdout.is_empty(),
        "with --out the document must not also go to stdout"
    );
    let body = std::fs::read_to_string(&out).expect("result file exists");
    let result: ScoreResult = serde_json::from_str(&body).expect("result parses");
    assert_eq!(result.critiques.len(), 32);
    assert_eq!(result.per_critique_rewards.len(), 32);
    assert!(result.reward.is_finite());
    assert!((0.0..=1.0).contains(&result.reward_display));

    // Same seed, same request: byte-identical result file.
    let again = dir.path().join("result-again.json");
    let output = score(&again);
    assert_exit(&output, 0, "score --out rerun");
    let first = std::fs::read(&out).expect("first result");
    let second = std::fs::read(&again).expect("second result");
    assert_eq!(first, second, "scoring is not reproducible for a fixed seed");
}

// --- staged commands vs the one-shot pipeline ---------------------------

#[test]
fn staged_commands_agree_with_the_one_shot_pipeline() {
    let dir = tempfile::tempdir().expect("tempdir");
    let corpus = synth_corpus(&SynthConfig {
        n_pairs: 24,
        signal_strength: 0.8,
        seed: 21,
    })
    .expect("corpus");
    let pairs_path = dir.path().join("pairs.ldjson");
    write_pairs(&pairs_path, &corpus.pairs).expect("pairs write");

    // The fixture must script the same run the CLI will resolve: defaults
    // everywhere, root seed 21.
    let cfg = PipelineConfig {
        seed: 21,
        ..PipelineConfig::default()
    };
    let fixture = build_fixture(
        &corpus.pairs,
        &corpus.gold,
        &cfg,
        &TemplateStore::builtin(),
        &JudgeProfile::default(),
    )
    .expect("fixture builds");
    let fixture_path = dir.path().join("judge.fixture.json");
    fixture.save(&fixture_path).expect("fixture saves");

    let candidates = dir.path().join("candidates.ldjson");
    let decisions = dir.path().join("decisions.ldjson");
    let refined_staged = dir.path().join("refined-staged.ldjson");
    let refined_pipe = dir.path().join("refined-pipeline.ldjson");
    let stats_path = dir.path().join("stats.json");

    let base = ["--seed", "21", "--fixture", path_str(&fixture_path)];

    let output = run(bin()
        .args(["generate", "--pairs", path_str(&pairs_path), "--out", path_str(&candidates)])
        .args(base));
    assert_exit(&output, 0, "generate");

    let output = run(bin().args([
        "filter",
        "--pairs",
        path_str(&pairs_path),
        "--candidates",
        path_str(&candidates),
        "--out",
        path_str(&decisions),
        "--seed",
        "21",
    ]));
    assert_exit(&output, 0, "filter");

    let output = run(bin()
        .args([
            "refine",
            "--pairs",
            path_str(&pairs_path),
            "--candidates",
            path_str(&candidates),
            "--out",
            path_str(&refined_staged),
        ])
        .args(base));
    assert_exit(&output, 0, "refine");

    let output = run(bin()
        .args([
            "pipeline",
            "--pairs",
            path_str(&pairs_path),
            "--out",
            path_str(&refined_pipe),
            "--stats-out",
            path_str(&stats_path),
        ])
        .args(base));
    assert_exit(&output, 0, "pipeline");

    let lines = |path: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(path)
            .expect("artifact exists")
            .lines()
            .map(|line| serde_json::from_str(line).expect("line parses"))
            .collect()
    };

    // Which pairs did the standalone filter keep?
    let kept_ids: Vec<String> = lines(&decisions)
        .iter()
        .filter(|record| record["keep"].as_bool().expect("keep is a bool"))
        .map(|record| record["pair_id"].as_str().expect("pair_id is a string").to_string())
        .collect();
    assert!(
        !kept_ids.is_empty() && kept_ids.len() < corpus.pairs.len(),
        "expected the filter to keep some but not all of {} pairs, kept {}",
        corpus.pairs.len(),
        kept_ids.len()
    );

    // The one-shot pipeline kept exactly those pairs, in order, and refined
    // them to exactly what the standalone refine produced.
    let staged = lines(&refined_staged);
    let piped = lines(&refined_pipe);
    let pipe_ids: Vec<String> = piped
        .iter()
        .map(|v| v["id"].as_str().expect("id").to_string())
        .collect();
    assert_eq!(pipe_ids, kept_ids, "pipeline kept a different pair set than filter");

    let staged_by_id: std::collections::BTreeMap<&str, &serde_json::Value> = staged
        .iter()
        .map(|v| (v["id"].as_str().expect("id"), v))
        .collect();
    for value in &piped {
        let id = value["id"].as_str().expect("id");
        let from_staged = staged_by_id[id];
        assert_eq!(
            *from_staged, *value,
            "pair {id}: staged refine and pipeline disagree"
        );
    }

    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats_path).expect("stats exist"))
            .expect("stats parse");
    assert_eq!(stats["processed"].as_u64(), Some(corpus.pairs.len() as u64));
    assert_eq!(stats["kept"].as_u64(), Some(kept_ids.len() as u64));
}

// --- serving ------------------------------------------------------------

#[test]
fn serve_answers_requests_and_stops_cleanly_on_interrupt() {
    let dir = tempfile::tempdir().expect("tempdir");
    let ckpt = dir.path().join("model.json");
    write_checkpoint(&ckpt);

    // Reserve a free port, then hand it to the server.
    let port = {
        let probe = std::net::TcpListener::bind("127.0.0.1:0").expect("probe binds");
        probe.local_addr().expect("probe addr").port()
    };
    let addr = format!("127.0.0.1:{port}");

    let mut child = bin()
        .args(["serve", "--checkpoint", path_str(&ckpt), "--bind", &addr])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .expect("server spawns");

    // Wait for the health endpoint to come up.
    let health_url = format!("http://{addr}/healthz");
    let deadline = Instant::now() + Duration::from_secs(10);
    let health = loop {
        match reqwest::blocking::get(&health_url) {
            Ok(response) if response.status() == 200 => {
                break response.json::<serde_json::Value>().expect("health body parses")
            }
            _ if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            _ => {
                let _ = child.kill();
                panic!("server did not come up on {addr} within 10s");
            }
        }
    };
    assert!(
        health["model_checksum"].as_str().is_some_and(|s| !s.is_empty()),
        "health body should carry the model checksum: {health}"
    );

    // One real scoring round trip through the running server.
    let response = reqwest::blocking::Client::new()
        .post(format!("http://{addr}/v1/score"))
        .json(&serde_json::json!({
            "prompt": "alpha beta",
            "response": "gamma",
            "m": 3,
            "temperature": 0.9,
            "seed": 11,
        }))
        .send()
        .expect("score request sends");
    assert_eq!(response.status(), 200);
    let scored: ScoreResult = response.json().expect("score body parses");
    assert_eq!(scored.critiques.len(), 3);

    // SIGINT must produce a graceful (exit 0) shutdown.
    let pid = child.id().to_string();
    let killed = Command::new("kill")
        .args(["-INT", &pid])
        .status()
        .expect("kill runs");
    assert!(killed.success(), "kill -INT failed");

    let deadline = Instant::now() + Duration::from_secs(10);
    let status = loop {
        match child.try_wait().expect("wait works") {
            Some(status) => break status,
            None if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            None => {
                let _ = child.kill();
                panic!("server did not exit within 10s of SIGINT");
            }
        }
    };
    assert_eq!(status.code(), Some(0), "interrupted server should exit cleanly");
}
