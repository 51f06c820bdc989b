use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_clusterseq"));
    c.env_remove("CLUSTERSEQ_THREADS");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts failure with a single `error[CODE]: ...` line and returns the code.
fn fails(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| !l.starts_with("warning:")).collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    let line = lines[0];
    assert!(line.starts_with("error[E_"), "{line}");
    line[6..line.find(']').unwrap()].to_string()
}

/// Generated planted corpus, preprocessed into `prep/`.
fn prepared() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--seed", "2", "--out", "gen"]);
    ok(
        d,
        &["preprocess", "--input", "gen/interactions.csv", "--test-fraction", "0.2", "--out", "prep"],
    );
    let cache = d.join("prep").join("corpus.cseqd");
    (dir, cache)
}

#[test]
fn toy_csv_preprocesses_with_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("user,item,timestamp\n");
    for u in 0..5 {
        for t in 0..4 {
            csv.push_str(&format!("u{u},i{},{}\n", (u + t) % 6, 100 * u + t));
        }
    }
    fs::write(d.join("toy.csv"), &csv).unwrap();
    ok(d, &["preprocess", "--input", "toy.csv", "--test-fraction", "0.2", "--out", "a"]);
    let stats = fs::read_to_string(d.join("a/stats.csv")).unwrap();
    let row: Vec<&str> = stats.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "5");
    ok(d, &["preprocess", "--input", "toy.csv", "--test-fraction", "0.2", "--out", "b"]);
    assert_eq!(
        fs::read(d.join("a/corpus.cseqd")).unwrap(),
        fs::read(d.join("b/corpus.cseqd")).unwrap()
    );
}

#[test]
fn pipeline_echoes_config_and_is_reproducible() {
    let (dir, cache) = prepared();
    let d = dir.path();
    let cache = cache.to_str().unwrap();
    for out in ["r1", "r2"] {
        ok(d, &["train", "--corpus", cache, "--epochs", "2", "--seed", "7", "--out", out]);
    }
    assert_eq!(
        fs::read(d.join("r1/model.ckpt")).unwrap(),
        fs::read(d.join("r2/model.ckpt")).unwrap()
    );
    let log = fs::read_to_string(d.join("r1/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    for out in ["e1", "e2"] {
        let line = ok(d, &["evaluate", "--corpus", cache, "--checkpoint", "r1/model.ckpt", "--out", out]);
        assert!(line.contains("MRR"), "{line}");
    }
    assert_eq!(
        fs::read(d.join("e1/eval.csv")).unwrap(),
        fs::read(d.join("e2/eval.csv")).unwrap()
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("e1/summary.json")).unwrap()).unwrap();
    assert!(summary["mrr"].as_f64().unwrap() > 0.0);

    for out in ["gen", "prep", "r1", "e1"] {
        let echo = fs::read_to_string(d.join(out).join("config.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&echo).unwrap();
        assert!(v["model"]["clusters"].is_u64(), "{out}");
    }
    let trained: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("r1/config.json")).unwrap()).unwrap();
    assert_eq!(trained["meta"]["seed"], 7);
    assert_eq!(trained["meta"]["epochs"], 2);
}

#[test]
fn zero_epochs_writes_initialization() {
    let (dir, cache) = prepared();
    let d = dir.path();
    let line = ok(d, &["train", "--corpus", cache.to_str().unwrap(), "--epochs", "0", "--out", "init"]);
    assert!(line.contains("initialization"), "{line}");
    assert!(d.join("init/model.ckpt").is_file());
}

#[test]
fn inspect_reports_every_user_and_agreement() {
    let (dir, cache) = prepared();
    let d = dir.path();
    let cache = cache.to_str().unwrap();
    ok(d, &["train", "--corpus", cache, "--epochs", "1", "--out", "run"]);
    let line = ok(
        d,
        &[
            "inspect-clusters",
            "--corpus",
            cache,
            "--checkpoint",
            "run/model.ckpt",
            "--labels",
            "gen/labels.csv",
            "--out",
            "ins",
        ],
    );
    assert!(line.contains("agreement"), "{line}");
    let stats = fs::read_to_string(d.join("prep/stats.csv")).unwrap();
    let users: usize = stats.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    let rows = fs::read_to_string(d.join("ins/clusters.csv")).unwrap();
    assert_eq!(rows.lines().count(), users + 1);
    let hist = fs::read_to_string(d.join("ins/histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 5);
}

#[test]
fn no_clustering_model_cannot_be_inspected() {
    let (dir, cache) = prepared();
    let d = dir.path();
    let cache = cache.to_str().unwrap();
    ok(d, &["train", "--corpus", cache, "--epochs", "1", "--no-clustering", "--out", "plain"]);
    ok(d, &["evaluate", "--corpus", cache, "--checkpoint", "plain/model.ckpt", "--out", "ev"]);
    let code = fails(d, &["inspect-clusters", "--corpus", cache, "--checkpoint", "plain/model.ckpt"]);
    assert_eq!(code, "E_CONFIG");
}

#[test]
fn sweep_dedups_and_records_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "gen"]);
    let out = run(
        d,
        &[
            "sweep",
            "--input",
            "gen/interactions.csv",
            "--axis",
            "M",
            "--values",
            "2,1,2",
            "--epochs",
            "1",
            "--test-fraction",
            "0.2",
            "--out",
            "sw",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("warning: duplicate sweep values"), "{err}");
    let csv = fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3, "{csv}");
    assert!(rows[0].starts_with("m,status"));
    assert!(rows[1].starts_with("1,E_CONFIG,"), "{}", rows[1]);
    assert!(rows[2].starts_with("2,ok,"), "{}", rows[2]);
}

#[test]
fn errors_are_single_coded_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(fails(d, &["train", "--corpus", "missing.cseqd"]), "E_IO");
    assert_eq!(fails(d, &["train"]), "E_CONFIG");
    assert_eq!(fails(d, &["train", "--bogus"]), "E_USAGE");
    assert_eq!(fails(d, &["sweep", "--axis", "q", "--values", "1"]), "E_USAGE");
    fs::write(d.join("bad.json"), r#"{"meta": {"epoch": 3}}"#).unwrap();
    assert_eq!(fails(d, &["generate", "--config", "bad.json"]), "E_CONFIG");
    fs::write(d.join("garbage.csv"), "a\nb\nc\n").unwrap();
    assert_eq!(fails(d, &["preprocess", "--input", "garbage.csv"]), "E_FORMAT");
    fs::write(d.join("corrupt.ckpt"), b"not a checkpoint").unwrap();
    fs::write(d.join("corpus.cseqd"), b"nor a corpus").unwrap();
    assert_eq!(
        fails(d, &["evaluate", "--corpus", "corpus.cseqd", "--checkpoint", "corrupt.ckpt"]),
        "E_FORMAT"
    );
}

#[test]
fn mismatched_checkpoint_is_a_compatibility_error() {
    let (dir, cache) = prepared();
    let d = dir.path();
    fs::write(
        d.join("small.json"),
        r#"{"planted": {"items": 120, "users": 200}}"#,
    )
    .unwrap();
    ok(d, &["generate", "--config", "small.json", "--out", "small"]);
    ok(
        d,
        &["preprocess", "--input", "small/interactions.csv", "--test-fraction", "0.2", "--out", "sp"],
    );
    ok(d, &["train", "--corpus", "sp/corpus.cseqd", "--epochs", "0", "--out", "sr"]);
    let code = fails(
        d,
        &["evaluate", "--corpus", cache.to_str().unwrap(), "--checkpoint", "sr/model.ckpt"],
    );
    assert_eq!(code, "E_COMPATIBILITY");
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bin()
        .current_dir(d)
        .env("CLUSTERSEQ_THREADS", "1")
        .args(["generate", "--out", "g"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = bin()
        .current_dir(d)
        .env("CLUSTERSEQ_THREADS", "many")
        .args(["generate", "--out", "g"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[E_CONFIG]"));
}

#[test]
fn help_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--help"]);
    for sub in ["preprocess", "train", "evaluate", "sweep", "inspect-clusters", "generate"] {
        assert!(out.contains(sub), "{sub}");
    }
}
