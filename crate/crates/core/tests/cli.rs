use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn tldr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tldr")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn tree_digest(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                out.insert(path, hex(&bytes));
            }
        }
    }
    out
}

/// Runs synth, gap-estimate, fit-projector, filter, retrain and evaluate on
/// the tiny preset under `root`.
fn pipeline(root: &Path) {
    let w = root.join("w");
    assert_ok(&tldr(&["--seed", "3", "--out", &p(&w), "synth"]));
    assert_ok(&tldr(&["--out", &p(&root.join("gap")), "gap-estimate", "--images", &p(&w.join("gap/image.npy")), "--texts", &p(&w.join("gap/text.npy"))]));
    assert_ok(&tldr(&[
        "--out", &p(&root.join("proj")), "fit-projector",
        "--x", &p(&w.join("train/clip_image.npy")), "--y", &p(&w.join("train/features.npy")),
        "--val-x", &p(&w.join("val/clip_image.npy")), "--val-y", &p(&w.join("val/features.npy")),
        "--gap", &p(&root.join("gap/gap.npy")), "--lambda-grid", "1,10,100",
    ]));
    assert_ok(&tldr(&[
        "--out", &p(&root.join("filt")), "filter", "--vocab", &p(&w.join("vocab.json")),
        "--bank", &p(&w.join("bank.npy")), "--bank-index", &p(&w.join("bank_index.json")),
        "--projector", &p(&root.join("proj")), "--head", &p(&w.join("head_init")),
        "--groups", &p(&w.join("groups.json")), "--relu",
    ]));
    assert_ok(&tldr(&[
        "--seed", "3", "--out", &p(&root.join("head")), "retrain", "--vocab", &p(&root.join("filt/filtered_vocab.json")),
        "--bank", &p(&w.join("bank.npy")), "--bank-index", &p(&w.join("bank_index.json")),
        "--projector", &p(&root.join("proj")), "--head-init", &p(&w.join("head_init")),
        "--val-features", &p(&w.join("val/features.npy")), "--groups", &p(&w.join("groups.json")),
        "--relu", "--lr", "0.05", "--momentum", "0.9", "--epochs", "5",
    ]));
    let eval = tldr(&[
        "--out", &p(&root.join("eval")), "evaluate", "--head", &p(&root.join("head")),
        "--features", &p(&w.join("test/features.npy")), "--groups", &p(&w.join("groups.json")),
    ]);
    assert_ok(&eval);
    let summary: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(summary["wga"].as_f64().unwrap() <= summary["mean_acc"].as_f64().unwrap() + 1e-12);
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path());
    for f in ["eval/report.json", "head/W_head.npy", "head/b_head.npy", "head/meta.json", "head/history.jsonl", "proj/lambda_search.json", "filt/filtered_vocab.json"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("eval/report.json")).unwrap()).unwrap();
    assert!(report["head_meta"].is_object());
}

#[test]
fn run_record_has_digests_and_no_timestamp() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("w");
    assert_ok(&tldr(&["--out", &p(&w), "synth"]));
    let out = tmp.path().join("gap");
    assert_ok(&tldr(&["--seed", "5", "--out", &p(&out), "gap-estimate", "--images", &p(&w.join("gap/image.npy")), "--texts", &p(&w.join("gap/text.npy"))]));
    let text = std::fs::read_to_string(out.join("run.json")).unwrap();
    let run: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(run["seed"], 5);
    let inputs = run["inputs"].as_object().unwrap();
    let image = std::fs::read(w.join("gap/image.npy")).unwrap();
    let want = hex(&image);
    assert!(inputs.values().any(|v| v.as_str() == Some(want.as_str())), "{inputs:?}");
    for key in ["time", "date", "timestamp", "started"] {
        assert!(!text.to_lowercase().contains(key), "run.json mentions {key}");
    }
}

#[test]
fn inputs_are_not_modified() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("w");
    assert_ok(&tldr(&["--out", &p(&w), "synth"]));
    let before = tree_digest(&w);
    assert_ok(&tldr(&["--out", &p(&tmp.path().join("gap")), "gap-estimate", "--images", &p(&w.join("gap/image.npy")), "--texts", &p(&w.join("gap/text.npy"))]));
    assert_ok(&tldr(&[
        "--out", &p(&tmp.path().join("proj")), "fit-projector",
        "--x", &p(&w.join("train/clip_image.npy")), "--y", &p(&w.join("train/features.npy")), "--unconstrained",
    ]));
    assert_eq!(before, tree_digest(&w));
}

#[test]
fn missing_flag_is_a_usage_error() {
    let o = tldr(&["fit-projector", "--x", "a.npy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn missing_out_is_a_usage_error() {
    let o = tldr(&["synth"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_lambda_grid_is_a_usage_error() {
    let o = tldr(&["--out", "/nonexistent", "fit-projector", "--x", "a", "--y", "b", "--unconstrained", "--lambda-grid", "5,1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let o = tldr(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("retrain"));
}

#[test]
fn mismatched_manifest_is_a_data_error_naming_both_files() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("w");
    assert_ok(&tldr(&["--out", &p(&w), "synth"]));
    let images = w.join("gap/image.npy");
    let wrong = w.join("test/clip_image.manifest.json");
    let o = tldr(&[
        "--out", &p(&tmp.path().join("gap")), "gap-estimate", "--images", &p(&images),
        "--images-manifest", &p(&wrong), "--texts", &p(&w.join("gap/text.npy")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let msg = stderr(&o);
    assert!(msg.contains("image.npy") && msg.contains("clip_image.manifest.json"), "{msg}");
}

#[test]
fn zero_lambda_with_rank_deficient_inputs_is_a_numerical_error() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("w");
    assert_ok(&tldr(&["--out", &p(&w), "synth"]));
    // fewer rows than columns makes the gram matrix singular
    let x = tldr_store_rows(&w.join("train/clip_image.npy"), &tmp.path().join("x.npy"), 3);
    let y = tldr_store_rows(&w.join("train/features.npy"), &tmp.path().join("y.npy"), 3);
    let o = tldr(&["--out", &p(&tmp.path().join("proj")), "fit-projector", "--x", &p(&x), "--y", &p(&y), "--unconstrained", "--lambda-grid", "0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn tldr_store_rows(src: &Path, dst: &Path, n: usize) -> PathBuf {
    let m = tldr::store::load_matrix(src).unwrap();
    let rows: Vec<usize> = (0..n).collect();
    tldr::store::save_matrix(&m.select(&rows), dst).unwrap();
    dst.to_path_buf()
}

#[test]
fn json_log_lines_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tldr"))
        .args(["--log", "json", "--out", &p(&tmp.path().join("w")), "synth"])
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert_ok(&o);
    let text = stderr(&o);
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    assert!(!lines.is_empty());
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap_or_else(|e| panic!("{l}: {e}"));
        assert!(v["level"].is_string() && v["msg"].is_string(), "{l}");
    }
}

#[test]
fn report_delta_of_identical_reports_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path());
    let r = p(&tmp.path().join("eval/report.json"));
    let o = tldr(&["report", &r, "--against", &r]);
    assert_ok(&o);
    let delta: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(delta["wga"].as_f64(), Some(0.0));
    assert_eq!(delta["mean_acc"].as_f64(), Some(0.0));
}
