use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xmatch(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmatch"))
        .args(args)
        .current_dir(cwd)
        .env("XMATCH_THREADS", "1")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = xmatch(args, cwd);
    assert!(
        out.status.success(),
        "xmatch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synthetic(dir: &Path) {
    ok(&["generate-synthetic", "--out-dir", "d", "--n-train", "600", "--n-test", "150", "--seed", "3"], dir);
}

fn metric(report: &str, name: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(name).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("{name} missing from report:\n{report}"))
}

#[test]
fn staged_commands_chain_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    ok(&["label2vec", "--input", "d/train.txt", "--dim", "16", "--epochs", "5", "--out", "W.vec"], dir);
    ok(&["build-tree", "--embeddings", "W.vec", "--branching", "2", "--max-leaf", "3", "--out", "tree"], dir);
    assert!(dir.join("tree").is_dir());
    ok(
        &["train-matcher", "--data", "d/train.txt", "--tree", "tree", "--dim", "16", "--steps", "100", "--out", "m"],
        dir,
    );
    ok(&["embed", "--matcher", "m", "--data", "d/test.txt", "--out", "z.vec"], dir);
    let header = fs::read_to_string(dir.join("z.vec")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "150 16");

    ok(&["train-ranker", "--features", "d/train.txt", "--tree", "tree", "--matcher", "m", "--out", "model"], dir);
    assert!(dir.join("model/manifest.json").is_file());
    ok(&["predict", "--model", "model", "--data", "d/test.txt", "--topk", "5", "--out", "pred.txt"], dir);
    let preds = fs::read_to_string(dir.join("pred.txt")).unwrap();
    assert_eq!(preds.lines().count(), 150);
    assert!(preds.lines().all(|l| l.split_whitespace().count() <= 5));

    let report = ok(
        &[
            "evaluate", "--pred", "pred.txt", "--truth", "d/test.txt", "--k", "1,3", "--psp", "--train", "d/train.txt",
            "--json", "r.json",
        ],
        dir,
    );
    assert!(metric(&report, "P@1") >= 90.0, "{report}");
    assert!(report.contains("PSP@3"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(json["n_rows"], 150);
    assert!(json["psndcg_at"]["1"].as_f64().unwrap() > 0.0);
}

#[test]
fn tfidf_tree_and_sparse_only_ranker() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    ok(&["build-tree", "--tfidf", "--data", "d/train.txt", "--branching", "2", "--max-leaf", "3", "--out", "tree"], dir);
    ok(&["train-ranker", "--features", "d/train.txt", "--tree", "tree", "--no-man", "--out", "model"], dir);
    ok(&["predict", "--model", "model", "--data", "d/test.txt", "--out", "pred.txt"], dir);
    let report = ok(&["evaluate", "--pred", "pred.txt", "--truth", "d/test.txt"], dir);
    assert!(metric(&report, "P@1") >= 90.0, "{report}");
}

#[test]
fn pipeline_writes_bundle_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    fs::write(dir.join("cfg.json"), r#"{"hlt": {"branching": 2, "max_leaf": 3}, "seed": 5}"#).unwrap();
    let report = ok(
        &["pipeline", "--config", "cfg.json", "--train", "d/train.txt", "--test", "d/test.txt", "--lambda", "1.0", "--out", "run"],
        dir,
    );
    assert!(metric(&report, "P@1") >= 90.0, "{report}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["matcher"]["lambda"], 1.0);
    assert_eq!(manifest["config"]["hlt"]["branching"], 2);
    assert!(dir.join("run/report.json").is_file());
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);

    let code = |args: &[&str]| xmatch(args, dir).status.code().unwrap();
    // Configuration errors.
    assert_eq!(code(&["pipeline", "--train", "d/train.txt", "--lambda", "2", "--out", "x"]), 2);
    assert_eq!(code(&["pipeline", "--out", "x"]), 2);
    assert_eq!(code(&["build-tree", "--out", "t"]), 2);
    // Data and i/o errors.
    fs::write(dir.join("bad.txt"), "2 3 2\n0 1:1.0 1:2.0\n1 0:1.0\n").unwrap();
    assert_eq!(code(&["label2vec", "--input", "bad.txt", "--out", "W.vec"]), 3);
    assert_eq!(code(&["predict", "--model", "missing", "--data", "d/test.txt", "--out", "p"]), 3);
    let err = String::from_utf8(xmatch(&["label2vec", "--input", "bad.txt", "--out", "W.vec"], dir).stderr).unwrap();
    assert!(err.contains("error:"), "{err}");
}

#[test]
fn same_seed_gives_identical_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    for out in ["a", "b"] {
        ok(
            &["pipeline", "--train", "d/train.txt", "--seed", "9", "--out", out],
            dir,
        );
        ok(&["predict", "--model", out, "--data", "d/test.txt", "--out", &format!("{out}.txt")], dir);
    }
    let read = |p: &str| fs::read(dir.join(p)).unwrap();
    assert_eq!(read("a/manifest.json"), read("b/manifest.json"));
    assert_eq!(read("a.txt"), read("b.txt"));
}
