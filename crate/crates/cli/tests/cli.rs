use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artisynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("ARTISYNTH_LLM_API_KEY")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Synthetic corpus, ingested, plus a two-step training run.
struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    checkpoint: PathBuf,
}

fn pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let synth = root.join("synth");
    let ingested = root.join("ingested");
    let run_dir = root.join("run");
    ok(&["synth-corpus", "--count", "40", "--seed", "3", "--out", s(&synth)]);
    ok(&[
        "ingest",
        "--manifest",
        s(&synth.join("manifest.jsonl")),
        "--seed",
        "1",
        "--out",
        s(&ingested),
    ]);
    let config = root.join("train.toml");
    fs::write(
        &config,
        format!(
            "max_steps = 2\nbatch_size = 4\neval_every = 0\ncheckpoint_every = 0\nsample_steps = 5\n\n\
             [data]\ncorpus = {:?}\nprompts = {:?}\nsplit = {:?}\n",
            ingested.join("corpus.jsonl"),
            synth.join("prompts.jsonl"),
            ingested.join("split.json"),
        ),
    )
    .unwrap();
    ok(&["train", "--config", s(&config), "--seed", "5", "--out", s(&run_dir)]);
    let checkpoint = run_dir.join("checkpoints").join("step-000002");
    assert!(checkpoint.join("meta.json").exists());
    Pipeline {
        _dir: dir,
        root,
        checkpoint,
    }
}

#[test]
fn empty_manifest_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    fs::write(&manifest, "").unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["ingest", "--manifest", s(&manifest), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    assert!(lines[0].starts_with("error: corpus_too_small:"), "{stderr}");
    assert!(lines[0].contains("corpus too small to split"));
    let m = read_json(&out_dir.join("run_manifest.json"));
    assert_eq!(m["command"], "ingest");
    assert_eq!(m["exit_status"], 1);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["ingest", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ingest_is_idempotent_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    ok(&["synth-corpus", "--count", "30", "--seed", "2", "--out", s(&synth)]);
    let manifest = synth.join("manifest.jsonl");
    let before = fs::read(&manifest).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["ingest", "--manifest", s(&manifest), "--seed", "4", "--out", s(&a)]);
    ok(&["ingest", "--manifest", s(&manifest), "--seed", "4", "--out", s(&b)]);
    assert_eq!(fs::read(&manifest).unwrap(), before);
    for f in ["corpus.jsonl", "rejects.jsonl", "split.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let split = read_json(&a.join("split.json"));
    assert_eq!(split["train"].as_array().unwrap().len(), 24);
    assert_eq!(split["val"].as_array().unwrap().len(), 3);
    assert_eq!(split["test"].as_array().unwrap().len(), 3);
    let m = read_json(&a.join("run_manifest.json"));
    assert_eq!(m["exit_status"], 0);
    assert_eq!(m["config"]["seed"], 4);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn generate_eval_and_report_round_trip() {
    let p = pipeline();
    let ck = s(&p.checkpoint);

    let g1 = p.root.join("g1");
    let g2 = p.root.join("g2");
    for g in [&g1, &g2] {
        ok(&[
            "generate",
            "--checkpoint",
            ck,
            "--prompt",
            "bronze vessel",
            "--prompt",
            "jade disc",
            "--seed",
            "9",
            "--out",
            s(g),
        ]);
    }
    for f in ["0000.png", "0001.png"] {
        assert_eq!(fs::read(g1.join(f)).unwrap(), fs::read(g2.join(f)).unwrap(), "{f}");
    }

    let corpus = p.root.join("ingested").join("corpus.jsonl");
    let prompts = p.root.join("synth").join("prompts.jsonl");
    let split = p.root.join("ingested").join("split.json");
    let mut reports = Vec::new();
    for (name, model) in [("a.json", "first"), ("b.json", "second")] {
        let out = p.root.join("eval").join(name);
        ok(&[
            "eval",
            "--checkpoint",
            ck,
            "--corpus",
            s(&corpus),
            "--prompts",
            s(&prompts),
            "--split-file",
            s(&split),
            "--model-id",
            model,
            "--out",
            s(&out),
        ]);
        let report = read_json(&out);
        assert_eq!(report["meta"]["clip_vs_scale"], "raw_cosine");
        assert_eq!(report["rows"].as_array().unwrap().len(), 4);
        reports.push(out);
    }
    assert!(p.root.join("eval").join("a.json.run_manifest.json").exists());

    let table = p.root.join("report.md");
    ok(&[
        "report",
        "--metrics",
        s(&reports[0]),
        s(&reports[1]),
        "--out",
        s(&table),
    ]);
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "| Model | CLIP-VS ↑ | SSIM ↑ | LPIPS ↓ |");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("| first |"));
    assert!(lines[3].starts_with("| second |"));
}

#[test]
fn train_manifest_holds_the_resolved_config() {
    let p = pipeline();
    let m = read_json(&p.root.join("run").join("run_manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["seed"], 5);
    assert_eq!(m["config"]["max_steps"], 2);
    assert_eq!(m["config"]["learning_rate"], 1e-6);
    assert!(m["wall_time_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn enhance_against_dead_endpoint_reports_every_failure() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    ok(&["synth-corpus", "--count", "3", "--out", s(&synth)]);
    let config = dir.path().join("llm.toml");
    fs::write(&config, "max_retries = 0\nbackoff_ms = 0\ntimeout_secs = 2.0\n").unwrap();
    let out_dir = dir.path().join("enh");
    let out = run(&[
        "enhance",
        "--corpus",
        s(&synth),
        "--config",
        s(&config),
        "--endpoint",
        "http://127.0.0.1:9/v1",
        "--out",
        s(&out_dir),
    ]);
    assert!(!out.status.success());
    let failures = fs::read_to_string(out_dir.join("failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 3);
    assert!(failures.lines().all(|l| l.contains("\"status\":\"failed\"")));
}
