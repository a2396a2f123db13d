//! End-to-end command tests against the built binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

static DIR_COUNTER: AtomicUsize = AtomicUsize::new(0);

fn scratch_dir(tag: &str) -> PathBuf {
    let id = DIR_COUNTER.fetch_add(1, Ordering::SeqCst);
    let dir = std::env::temp_dir().join(format!(
        "progseq-cli-{tag}-{}-{id}",
        std::process::id()
    ));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_progseq"));
    cmd.env_remove("PROGSEQ_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("command runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn collect_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn make_corpus(dir: &Path, seed: &str) {
    let out = run(&[
        "make-data",
        "--seed",
        seed,
        "--vocab",
        "6",
        "--sentences",
        "20",
        "--joints",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_success(&out);
}

fn tiny_train(corpus: &Path, out_dir: &Path, regime: &str) -> Output {
    let config = out_dir.join("config.json");
    fs::write(
        &config,
        r#"{
  "epochs": 2,
  "batch_size": 8,
  "model": { "layers": 1, "heads": 2, "embed_dim": 16, "ff_dim": 32 }
}"#,
    )
    .unwrap();
    run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        out_dir.join("run").to_str().unwrap(),
        "--regime",
        regime,
        "--seed",
        "5",
    ])
}

#[test]
fn make_data_same_seed_writes_identical_bytes() {
    let a = scratch_dir("det-a");
    let b = scratch_dir("det-b");
    make_corpus(&a.join("c"), "7");
    make_corpus(&b.join("c"), "7");
    assert_eq!(collect_files(&a.join("c")), collect_files(&b.join("c")));
}

#[test]
fn seed_env_var_overrides_the_flag() {
    let a = scratch_dir("env-a");
    let b = scratch_dir("env-b");
    make_corpus(&a.join("c"), "9");
    let out = bin()
        .env("PROGSEQ_SEED", "9")
        .args([
            "make-data",
            "--seed",
            "1",
            "--vocab",
            "6",
            "--sentences",
            "20",
            "--joints",
            "2",
            "--out",
            b.join("c").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out);
    assert_eq!(collect_files(&a.join("c")), collect_files(&b.join("c")));
}

#[test]
fn make_data_missing_out_is_a_usage_error() {
    let out = run(&["make-data", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn make_data_refuses_nonempty_target_without_force() {
    let dir = scratch_dir("force");
    let target = dir.join("c");
    make_corpus(&target, "3");
    let out = run(&[
        "make-data",
        "--seed",
        "3",
        "--vocab",
        "6",
        "--sentences",
        "20",
        "--joints",
        "2",
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    let forced = run(&[
        "make-data",
        "--seed",
        "3",
        "--vocab",
        "6",
        "--sentences",
        "20",
        "--joints",
        "2",
        "--out",
        target.to_str().unwrap(),
        "--force",
    ]);
    assert_success(&forced);
}

#[test]
fn vocab_flag_sizes_the_manifest() {
    let dir = scratch_dir("vocab");
    let out = run(&[
        "make-data",
        "--seed",
        "1",
        "--vocab",
        "12",
        "--sentences",
        "30",
        "--joints",
        "2",
        "--out",
        dir.join("c").to_str().unwrap(),
    ]);
    assert_success(&out);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("c/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["vocab"].as_array().unwrap().len(), 12);
}

#[test]
fn train_smoke_writes_checkpoint_log_and_config() {
    let dir = scratch_dir("train");
    let corpus = dir.join("c");
    make_corpus(&corpus, "2");
    let out = tiny_train(&corpus, &dir, "regression");
    assert_success(&out);
    assert!(dir.join("run/checkpoint/manifest.json").exists());
    assert!(dir.join("run/checkpoint/params.bin").exists());
    let log = fs::read_to_string(dir.join("run/train-log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let run_config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/run-config.json")).unwrap())
            .unwrap();
    assert_eq!(run_config["train"]["seed"], 5);
}

#[test]
fn invalid_regime_is_a_usage_error_listing_regimes() {
    let dir = scratch_dir("regime");
    let corpus = dir.join("c");
    make_corpus(&corpus, "2");
    let out = run(&[
        "train",
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
        "--regime",
        "vae",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("regression") && stderr.contains("mdn_adv"), "{stderr}");
}

#[test]
fn mdn_regime_defaults_to_four_components() {
    let dir = scratch_dir("mdn4");
    let corpus = dir.join("c");
    make_corpus(&corpus, "2");
    let out = tiny_train(&corpus, &dir, "mdn");
    assert_success(&out);
    let manifest =
        fs::read_to_string(dir.join("run/checkpoint/manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed["model"]["head"]["components"], 4);
}

#[test]
fn generate_teacher_timing_emits_exact_frame_count() {
    let dir = scratch_dir("gen");
    let corpus = dir.join("c");
    make_corpus(&corpus, "2");
    assert_success(&tiny_train(&corpus, &dir, "regression"));
    let pose = dir.join("out.poseq");
    let out = run(&[
        "generate",
        "--checkpoint",
        dir.join("run/checkpoint").to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--input",
        "w01 w03",
        "--mode",
        "teacher:12",
        "--out",
        pose.to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = fs::read_to_string(&pose).unwrap();
    assert!(text.starts_with("POSEQ1 2 12\n"), "{}", &text[..30]);
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn generate_feedback_terminates_within_u_max() {
    let dir = scratch_dir("gen-fb");
    let corpus = dir.join("c");
    make_corpus(&corpus, "2");
    assert_success(&tiny_train(&corpus, &dir, "regression"));
    let pose = dir.join("out.poseq");
    let out = run(&[
        "generate",
        "--checkpoint",
        dir.join("run/checkpoint").to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--input",
        "w00 w02",
        "--out",
        pose.to_str().unwrap(),
    ]);
    assert_success(&out);
    let header = fs::read_to_string(&pose).unwrap();
    let frames: usize = header
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!(frames >= 1 && frames <= 300);
}

#[test]
fn generate_rejects_unknown_tokens_by_name() {
    let dir = scratch_dir("gen-tok");
    let corpus = dir.join("c");
    make_corpus(&corpus, "2");
    assert_success(&tiny_train(&corpus, &dir, "regression"));
    let out = run(&[
        "generate",
        "--checkpoint",
        dir.join("run/checkpoint").to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--input",
        "w01 zebra",
        "--out",
        dir.join("out.poseq").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zebra"));
}

#[test]
fn evaluate_emits_fixed_report_keys_and_checks_split() {
    let dir = scratch_dir("eval");
    let corpus = dir.join("c");
    make_corpus(&corpus, "2");
    assert_success(&tiny_train(&corpus, &dir, "regression"));
    let out = run(&[
        "evaluate",
        "--checkpoint",
        dir.join("run/checkpoint").to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        dir.join("eval").to_str().unwrap(),
    ]);
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("eval/report.json")).unwrap()).unwrap();
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "dtw_mean", "truncated_count"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let bad = run(&[
        "evaluate",
        "--checkpoint",
        dir.join("run/checkpoint").to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--split",
        "validation",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn evaluate_rejects_mismatched_joint_count() {
    let dir = scratch_dir("eval-j");
    let corpus2 = dir.join("c2");
    let corpus3 = dir.join("c3");
    make_corpus(&corpus2, "2");
    let out = run(&[
        "make-data",
        "--seed",
        "2",
        "--vocab",
        "6",
        "--sentences",
        "20",
        "--joints",
        "3",
        "--out",
        corpus3.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_success(&tiny_train(&corpus2, &dir, "regression"));
    let bad = run(&[
        "evaluate",
        "--checkpoint",
        dir.join("run/checkpoint").to_str().unwrap(),
        "--data",
        corpus3.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("joint"));
}

#[test]
fn render_writes_one_svg_per_frame_deterministically() {
    let dir = scratch_dir("render");
    let corpus = dir.join("c");
    make_corpus(&corpus, "2");
    let pose_file = corpus.join("poses/s00000.poseq");
    let frames: usize = fs::read_to_string(&pose_file)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    for tag in ["a", "b"] {
        let out = run(&[
            "render",
            "--pose",
            pose_file.to_str().unwrap(),
            "--out",
            dir.join(tag).to_str().unwrap(),
        ]);
        assert_success(&out);
    }
    let svg_count = fs::read_dir(dir.join("a"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "svg")
        })
        .count();
    assert_eq!(svg_count, frames);
    assert!(dir.join("a/pose.csv").exists());
    assert_eq!(collect_files(&dir.join("a")), collect_files(&dir.join("b")));
}

#[test]
fn render_reports_parse_errors_with_line_numbers() {
    let dir = scratch_dir("render-bad");
    let bad = dir.join("bad.poseq");
    fs::write(&bad, "POSEXX 1 1\n0 0 0 1\n").unwrap();
    let out = run(&[
        "render",
        "--pose",
        bad.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1:"));
}

#[test]
fn gradcheck_passes_under_a_minute() {
    let started = std::time::Instant::now();
    let out = run(&["gradcheck"]);
    assert_success(&out);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradcheck took {elapsed}s");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("matmul") && stdout.contains("pass"));
    assert!(!stdout.contains("FAIL"));
}
